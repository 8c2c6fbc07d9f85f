#pragma once

#include <string>
#include <vector>

#include "lapkv/compressor.hpp"

namespace lapkv {

enum class BaselineKind { UniformTopK, Pyramid, InitialRecent };

const char* baseline_kind_name(BaselineKind k);
BaselineKind baseline_kind_from_name(const std::string& name);

// Fixed-budget pruning policy: the per-layer budgets are set up front instead
// of being searched under a divergence check.
struct BaselineSpec {
    BaselineKind kind = BaselineKind::UniformTopK;
    double rho = 0.5;            // global retention ratio
    double pyramid_slope = 1.0;  // linear decay of budgets toward the top layer
    int sink = 4;                // leading tokens kept by InitialRecent

    void validate() const;
};

// Linear-decay allocator: layer l (0 = bottom) gets weight 1 + slope*(L-1-l);
// budgets are total * weight / sum(weights), rounded by largest remainder so
// they add up to total exactly, then clamped to at least one per layer.
std::vector<int> pyramid_budgets(int total, int num_layers, double slope);

// Same chunk pipeline as compress, with the budget policy swapped in. Scores
// reuse the adaptive path's importance machinery so only the policy differs.
std::pair<KvMemory, CompressionReport> baseline_compress(const ToyTransformer& model,
                                                         const std::vector<Demonstration>& demos,
                                                         const BaselineSpec& spec,
                                                         const ChunkPlan& plan,
                                                         const PromptLayout& layout);

}  // namespace lapkv
