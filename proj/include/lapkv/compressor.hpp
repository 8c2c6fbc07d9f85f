#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "lapkv/lap.hpp"
#include "lapkv/prompt.hpp"

namespace lapkv {

// Order-preserving assignment of demonstrations to chunks. Ranges are
// half-open demo indices; chunk 0 additionally carries the system prefix.
struct ChunkPlan {
    std::vector<std::pair<int, int>> ranges;
    int64_t budget_tokens = 0;

    int chunk_count() const { return static_cast<int>(ranges.size()); }
};

// Greedy fill: walk demos in order, opening a new chunk whenever the next demo
// would overflow the token budget.
ChunkPlan plan_chunks(const std::vector<Demonstration>& demos, int64_t budget_tokens);

// Evenly split the demos into k chunks (sizes differ by at most one).
ChunkPlan plan_chunk_count(const std::vector<Demonstration>& demos, int k);

struct CompressionReport {
    std::vector<PruneReport> chunks;
    int64_t context_tokens = 0;   // assembled context length including system prefix
    int64_t entries_before = 0;   // context_tokens * num_layers
    int64_t entries_after = 0;
    double ratio = 1.0;           // entries_after / entries_before
    double mean_kept_per_layer = 0.0;  // compressed-context-length analogue
    double wall_ms = 0.0;
    RoleCensus kept;
    RoleCensus removed;
};

// Chunk-sequential compression: each chunk is pruned conditioned on the
// compressed memory of everything before it.
std::pair<KvMemory, CompressionReport> compress(const ToyTransformer& model,
                                                const std::vector<Demonstration>& demos,
                                                const RetentionPolicy& policy,
                                                const ChunkPlan& plan,
                                                const PromptLayout& layout);

// The unpruned cache of the whole context, built with the same chunk walk.
KvMemory extract_full(const ToyTransformer& model, const std::vector<Demonstration>& demos,
                      const ChunkPlan& plan, const PromptLayout& layout);

// Entries of the given source chunk only.
KvMemory restrict_to_chunk(const KvMemory& memory, int chunk_index);

int64_t context_token_count(const std::vector<Demonstration>& demos, const PromptLayout& layout);

// Greedy decoding of up to max_new tokens for an answerless query conditioned
// on the memory. Returns the generated token ids.
std::vector<int> answer(const ToyTransformer& model, const KvMemory& memory,
                        const Demonstration& query, const PromptLayout& layout,
                        int64_t start_position, int max_new);

// Fraction of queries whose greedy decode matches the gold answer exactly.
// threads > 1 splits the queries over a worker pool; results are merged in
// query order so the value is thread-count independent.
double evaluate_accuracy(const ToyTransformer& model, const KvMemory& memory,
                         const std::vector<Demonstration>& queries, const PromptLayout& layout,
                         int64_t start_position, int threads = 1);

// Per-query aggregate JS divergence between teacher-forced answer
// distributions under memory_a and memory_b.
std::vector<double> answer_js_per_query(const ToyTransformer& model, const KvMemory& memory_a,
                                        const KvMemory& memory_b,
                                        const std::vector<Demonstration>& queries,
                                        const PromptLayout& layout, int64_t start_position);

struct BoundEstimate {
    double delta_hat = 0.0;         // mean aggregate JS divergence, full vs compressed
    double global_distance = 0.0;   // sqrt(delta_hat)
    double epsilon_hat = 0.0;       // mean aggregate JS divergence, full vs first chunk only
    double epsilon_distance = 0.0;  // sqrt(epsilon_hat)
    int chunk_count = 1;
    double delta = 0.0;
    double gamma = 0.0;      // delta_hat / delta
    double bound_rhs = 0.0;  // (K-1)*sqrt(delta) + epsilon_distance
};

// Measures the end-to-end information loss of a compression run on held-out
// demonstrations drawn from the same generator.
BoundEstimate measure_bound(const ToyTransformer& model,
                            const std::vector<Demonstration>& demos,
                            const std::vector<Demonstration>& eval_demos,
                            const RetentionPolicy& policy, const ChunkPlan& plan,
                            const PromptLayout& layout);

// Same, against an already-compressed memory produced by the given policy and
// plan (avoids re-running the compression).
BoundEstimate measure_bound_on(const ToyTransformer& model,
                               const std::vector<Demonstration>& demos,
                               const std::vector<Demonstration>& eval_demos,
                               const RetentionPolicy& policy, const ChunkPlan& plan,
                               const PromptLayout& layout, const KvMemory& compressed);

}  // namespace lapkv
