#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lapkv/divergence.hpp"
#include "lapkv/kvmem.hpp"
#include "lapkv/model.hpp"
#include "lapkv/prompt.hpp"

namespace lapkv {

enum class ObservationWindow { Answer, QuestionAnswer, ImageQuestionAnswer };

const char* observation_window_name(ObservationWindow w);
ObservationWindow observation_window_from_name(const std::string& name);

// Adaptive retention policy: candidate ratios are scanned in ascending order
// and the first one whose pruned output stays within the divergence budget
// wins. The final ratio must be 1.0 so the search always terminates.
struct RetentionPolicy {
    std::vector<double> ratios{0.1, 0.2, 0.5, 1.0};
    double delta = 0.005;
    int group_size = 1;  // adjacent layers sharing one ratio; 1 = per layer
    ObservationWindow window = ObservationWindow::Answer;
    bool retain_all_answers = true;
    JsAggregate js_aggregate = JsAggregate::Mean;
    // Recompute importance scores from a fresh forward after each accepted
    // layer instead of reusing the initial trace. Experimental; off by default.
    bool refresh_scores = false;
    // Renumber surviving positions contiguously after compression instead of
    // keeping the original ids (keys are re-rotated accordingly).
    bool renumber_positions = false;

    void validate() const;
};

// Per-layer accumulated attention received from the observation window,
// restricted to the current chunk's cache columns.
struct ImportanceScores {
    std::vector<std::vector<double>> per_layer;  // [L][S]
};

struct LayerPruneRecord {
    int layer = 0;
    double chosen_ratio = 1.0;
    int retained = 0;
    int chunk_len = 0;
    std::vector<double> attempted_ratios;
    std::vector<double> attempted_js;
};

struct PruneReport {
    std::vector<LayerPruneRecord> layers;  // ordered top layer first
    int chunk_len = 0;
    int64_t entries_before = 0;
    int64_t entries_after = 0;
};

// beta^l_j: attention into chunk column j summed over the window rows of every
// batch item. chunk_begin gives the chunk's first memory column per layer.
ImportanceScores score_importance(const ForwardTrace& trace,
                                  const std::vector<int>& window_flat,
                                  const std::vector<int>& chunk_begin, int chunk_len);

// Top-floor(ratio*len) indices by score, union the forced ones; ties keep the
// earlier token. Result is ascending and never empty.
LayerSelection select_topk(const ImportanceScores& scores, int layer, double ratio,
                           const std::vector<int>& forced);

// Same with an explicit retained count instead of a ratio.
LayerSelection select_topk_count(const ImportanceScores& scores, int layer, int count,
                                 const std::vector<int>& forced);

// Query positions (flattened row*T + t) covered by the window mode.
std::vector<int> window_indices(const std::vector<DemoSpans>& row_spans, int row_len,
                                ObservationWindow mode);

// Positions whose next-token predictions are the answer tokens (flattened).
std::vector<int> answer_logit_indices(const std::vector<DemoSpans>& row_spans, int row_len);

// One chunk of layer-wise adaptive pruning: extract the chunk cache, score it
// against the demonstration batch, then walk layers top-down accepting the
// smallest ratio that keeps the answer distributions within delta. Returns
// memory_prev joined with the pruned chunk.
std::pair<KvMemory, PruneReport> lap_compress(const ToyTransformer& model,
                                              const KvMemory& memory_prev,
                                              const ChunkInput& chunk,
                                              const RetentionPolicy& policy);

// Forced indices for one chunk under the policy: the final answer token
// always, every answer-role token when retain_all_answers is set.
std::vector<int> forced_chunk_indices(const std::vector<TokenRole>& roles,
                                      bool retain_all_answers);

}  // namespace lapkv
