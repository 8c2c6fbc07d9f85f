#pragma once

#include <vector>

#include "lapkv/model.hpp"

namespace lapkv {

/// Jensen-Shannon divergence in base 2, so the result lies in [0, 1].
/// Symmetric by construction; zero-probability entries contribute zero.
/// Inputs must be normalized to 1 within 1e-6 and of equal length.
double js_divergence(const std::vector<double>& p, const std::vector<double>& q);

/// Square root of js_divergence; a metric (satisfies the triangle inequality).
double js_distance(const std::vector<double>& p, const std::vector<double>& q);

enum class JsAggregate { Mean, Max };

// Output probability vectors at the teacher-forced answer positions of a
// demonstration batch. index holds flattened batch positions (row * T + t).
struct AnswerDistributions {
    std::vector<int> index;
    std::vector<std::vector<double>> probs;
};

// Softmax the trace logits at the given flattened positions.
AnswerDistributions answer_distributions(const ForwardTrace& trace,
                                         const std::vector<int>& flat_positions);

double aggregate_js(const AnswerDistributions& a, const AnswerDistributions& b,
                    JsAggregate mode = JsAggregate::Mean);

std::vector<double> softmax_row(const double* logits, int n);

}  // namespace lapkv
