#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace lapkv {

// Dense row-major matrix of doubles. Everything in this project is fp64;
// divergence thresholds around 5e-3 leave little room for fp32 noise.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }
    void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b

// acc += a * b and friends, used by the backward pass
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& acc);
void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& acc);
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& acc);

void add_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, double s);
bool all_finite(const Matrix& a);

// In-place softmax over a contiguous score row.
void softmax_inplace(double* x, int n);

// Deterministic RNG wrapper; every randomized component takes an explicit seed.
struct Rng {
    std::mt19937_64 gen;

    explicit Rng(uint64_t seed) : gen(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen);
    }
    double uniform() {
        std::uniform_real_distribution<double> d(0.0, 1.0);
        return d(gen);
    }
    // inclusive bounds
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> d(lo, hi);
        return d(gen);
    }
    uint64_t next_seed() { return gen(); }
};

void fill_normal(Matrix& m, Rng& rng, double stddev);

}  // namespace lapkv
