#include "lapkv/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace lapkv {

static void check_mm(int an, int bn, const char* what) {
    if (an != bn) {
        throw std::invalid_argument(std::string("matmul shape mismatch in ") + what);
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_mm(a.cols, b.rows, "matmul");
    Matrix out(a.rows, b.cols);
    matmul_acc(a, b, out);
    return out;
}

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& acc) {
    check_mm(a.cols, b.rows, "matmul_acc");
    check_mm(acc.rows, a.rows, "matmul_acc out");
    check_mm(acc.cols, b.cols, "matmul_acc out");
    const int n = b.cols;
    // i-k-j order keeps the inner loop contiguous in both b and acc
    for (int i = 0; i < a.rows; ++i) {
        const double* __restrict arow = a.row(i);
        double* __restrict orow = acc.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* __restrict brow = b.row(k);
            for (int j = 0; j < n; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_mm(a.cols, b.cols, "matmul_nt");
    Matrix out(a.rows, b.rows);
    matmul_nt_acc(a, b, out);
    return out;
}

void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& acc) {
    check_mm(a.cols, b.cols, "matmul_nt_acc");
    const int n = a.cols;
    for (int i = 0; i < a.rows; ++i) {
        const double* __restrict arow = a.row(i);
        double* __restrict orow = acc.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* __restrict brow = b.row(j);
            double s = 0.0;
            for (int k = 0; k < n; ++k) s += arow[k] * brow[k];
            orow[j] += s;
        }
    }
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_mm(a.rows, b.rows, "matmul_tn");
    Matrix out(a.cols, b.cols);
    matmul_tn_acc(a, b, out);
    return out;
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& acc) {
    check_mm(a.rows, b.rows, "matmul_tn_acc");
    const int n = b.cols;
    for (int k = 0; k < a.rows; ++k) {
        const double* __restrict arow = a.row(k);
        const double* __restrict brow = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            double* __restrict orow = acc.row(i);
            for (int j = 0; j < n; ++j) {
                orow[j] += aki * brow[j];
            }
        }
    }
}

void add_inplace(Matrix& a, const Matrix& b) {
    check_mm(static_cast<int>(a.size()), static_cast<int>(b.size()), "add_inplace");
    for (size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

void scale_inplace(Matrix& a, double s) {
    for (double& v : a.data) v *= s;
}

bool all_finite(const Matrix& a) {
    for (double v : a.data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void softmax_inplace(double* x, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) x[i] *= inv;
}

void fill_normal(Matrix& m, Rng& rng, double stddev) {
    for (double& v : m.data) v = rng.normal(0.0, stddev);
}

}  // namespace lapkv
