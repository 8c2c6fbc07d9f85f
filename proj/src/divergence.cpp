#include "lapkv/divergence.hpp"

#include <cmath>
#include <stdexcept>

namespace lapkv {

namespace {

constexpr double kLogFloor = 1e-12;
const double kInvLog2 = 1.0 / std::log(2.0);

void check_normalized(const std::vector<double>& p, const char* name) {
    double sum = 0.0;
    for (double v : p) {
        if (v < 0.0) throw std::invalid_argument(std::string(name) + ": negative probability");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw std::invalid_argument(std::string(name) + ": probabilities do not sum to 1");
    }
}

}  // namespace

double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw std::invalid_argument("js_divergence: length mismatch");
    check_normalized(p, "js_divergence p");
    check_normalized(q, "js_divergence q");

    // 0 * log 0 := 0. The two KL halves accumulate separately and join with
    // one commutative addition, which keeps the result bit-identical under
    // argument swap even when the compiler contracts multiplies into FMAs.
    double acc_p = 0.0;
    double acc_q = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        const double lm = std::log(std::max(m, kLogFloor));
        if (p[i] > 0.0) acc_p += p[i] * (std::log(std::max(p[i], kLogFloor)) - lm);
        if (q[i] > 0.0) acc_q += q[i] * (std::log(std::max(q[i], kLogFloor)) - lm);
    }
    const double js = 0.5 * (acc_p + acc_q) * kInvLog2;
    return js < 0.0 ? 0.0 : js;
}

double js_distance(const std::vector<double>& p, const std::vector<double>& q) {
    return std::sqrt(js_divergence(p, q));
}

std::vector<double> softmax_row(const double* logits, int n) {
    std::vector<double> out(logits, logits + n);
    softmax_inplace(out.data(), n);
    return out;
}

AnswerDistributions answer_distributions(const ForwardTrace& trace,
                                         const std::vector<int>& flat_positions) {
    if (flat_positions.empty()) {
        throw std::invalid_argument("answer_distributions: empty position list");
    }
    const int B = static_cast<int>(trace.logits.size());
    const int T = B > 0 ? trace.logits[0].rows : 0;
    AnswerDistributions out;
    out.index = flat_positions;
    out.probs.reserve(flat_positions.size());
    for (int flat : flat_positions) {
        const int b = flat / T;
        const int t = flat % T;
        if (b < 0 || b >= B || t < 0 || t >= T) {
            throw std::invalid_argument("answer_distributions: position out of range");
        }
        out.probs.push_back(softmax_row(trace.logits[b].row(t), trace.logits[b].cols));
    }
    return out;
}

double aggregate_js(const AnswerDistributions& a, const AnswerDistributions& b,
                    JsAggregate mode) {
    if (a.index != b.index || a.probs.size() != b.probs.size()) {
        throw std::invalid_argument("aggregate_js: answer position mismatch");
    }
    double acc = 0.0;
    for (size_t i = 0; i < a.probs.size(); ++i) {
        const double js = js_divergence(a.probs[i], b.probs[i]);
        if (mode == JsAggregate::Max) {
            acc = std::max(acc, js);
        } else {
            acc += js;
        }
    }
    if (mode == JsAggregate::Mean) acc /= static_cast<double>(a.probs.size());
    return acc;
}

}  // namespace lapkv
