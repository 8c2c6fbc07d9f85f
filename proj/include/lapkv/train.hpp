#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lapkv/model.hpp"

namespace lapkv {

// Gradient buffers mirroring ToyTransformer's parameters.
struct ParamGrads {
    Matrix embed, unembed;
    std::vector<double> final_gain;
    std::vector<LayerWeights> layers;

    static ParamGrads zeros_like(const ToyTransformer& model);
    void zero();
};

// Uniform view over parameter groups, used by the optimizer and by
// finite-difference checks.
struct ParamView {
    std::string name;
    double* param = nullptr;
    double* grad = nullptr;
    size_t len = 0;
};

std::vector<ParamView> param_views(ToyTransformer& model, ParamGrads& grads);

enum class Optimizer { Sgd, Adam };

struct TrainConfig {
    int steps = 1000;
    int batch_size = 4;
    double learning_rate = 3e-3;
    double momentum = 0.9;       // sgd only
    Optimizer optimizer = Optimizer::Adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
    int log_every = 100;  // 0 silences per-step logging
    // Only positions whose next-token target lies in [target_lo, target_hi)
    // contribute to the loss; -1/-1 trains on every position.
    int target_lo = -1;
    int target_hi = -1;
    // Worker threads over independent batch items. Gradients merge in a fixed
    // order, so the result does not depend on scheduling.
    int threads = 1;
};

struct TrainResult {
    std::vector<double> losses;  // one per step
};

// Next-token cross-entropy of one causal sequence (no external memory).
double sequence_loss(const ToyTransformer& model, const std::vector<int>& tokens,
                     int target_lo = -1, int target_hi = -1);

// Same, and accumulates analytic gradients into grads.
double sequence_loss_grad(const ToyTransformer& model, const std::vector<int>& tokens,
                          int target_lo, int target_hi, ParamGrads& grads);

// SGD with optional momentum; deterministic for a fixed seed. Throws when the
// loss turns non-finite, naming the failing step.
TrainResult train(ToyTransformer& model, const std::vector<std::vector<int>>& dataset,
                  const TrainConfig& cfg);

}  // namespace lapkv
