#include "lapkv/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lapkv {

const char* baseline_kind_name(BaselineKind k) {
    switch (k) {
        case BaselineKind::UniformTopK: return "uniform_topk";
        case BaselineKind::Pyramid: return "pyramid";
        case BaselineKind::InitialRecent: return "initial_recent";
    }
    return "unknown";
}

BaselineKind baseline_kind_from_name(const std::string& name) {
    if (name == "uniform_topk") return BaselineKind::UniformTopK;
    if (name == "pyramid") return BaselineKind::Pyramid;
    if (name == "initial_recent") return BaselineKind::InitialRecent;
    throw std::invalid_argument("unknown baseline: " + name);
}

void BaselineSpec::validate() const {
    if (!(rho > 0.0) || rho > 1.0) throw std::invalid_argument("BaselineSpec: rho must be in (0, 1]");
    if (pyramid_slope < 0.0) throw std::invalid_argument("BaselineSpec: negative pyramid slope");
    if (sink < 0) throw std::invalid_argument("BaselineSpec: negative sink size");
}

std::vector<int> pyramid_budgets(int total, int num_layers, double slope) {
    if (num_layers < 1 || total < num_layers) {
        throw std::invalid_argument("pyramid_budgets: total must cover one token per layer");
    }
    std::vector<double> weight(num_layers);
    double wsum = 0.0;
    for (int l = 0; l < num_layers; ++l) {
        weight[l] = 1.0 + slope * (num_layers - 1 - l);
        wsum += weight[l];
    }
    std::vector<int> budget(num_layers);
    std::vector<std::pair<double, int>> frac(num_layers);
    int assigned = 0;
    for (int l = 0; l < num_layers; ++l) {
        const double exact = total * weight[l] / wsum;
        budget[l] = static_cast<int>(std::floor(exact + 1e-9));
        frac[l] = {exact - budget[l], l};
        assigned += budget[l];
    }
    // hand the remainder to the largest fractional parts, lower layers first
    std::sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int i = 0; i < total - assigned; ++i) budget[frac[i % num_layers].second] += 1;
    for (int l = 0; l < num_layers; ++l) {
        if (budget[l] < 1) {
            // steal from the fattest layer to keep every layer non-degenerate
            const int donor = static_cast<int>(
                std::max_element(budget.begin(), budget.end()) - budget.begin());
            budget[donor] -= 1;
            budget[l] = 1;
        }
    }
    return budget;
}

namespace {

std::vector<Demonstration> slice(const std::vector<Demonstration>& demos,
                                 std::pair<int, int> range) {
    return {demos.begin() + range.first, demos.begin() + range.second};
}

RoleCensus full_context_census(const std::vector<Demonstration>& demos,
                               const PromptLayout& layout, int num_layers) {
    AssembledContext ctx = assemble_context(demos, layout, /*include_system=*/true);
    RoleCensus c;
    c.per_layer.assign(num_layers, {0, 0, 0, 0});
    for (TokenRole r : ctx.roles) {
        for (int l = 0; l < num_layers; ++l) c.per_layer[l][static_cast<int>(r)] += 1;
        c.totals[static_cast<int>(r)] += 1;
    }
    return c;
}

LayerSelection initial_recent_selection(int layer, int chunk_len, int budget, int sink) {
    LayerSelection sel;
    sel.layer = layer;
    const int head = std::min(sink, budget);
    const int tail = budget - head;
    for (int i = 0; i < head; ++i) sel.kept.push_back(i);
    for (int i = std::max(head, chunk_len - tail); i < chunk_len; ++i) sel.kept.push_back(i);
    return sel;
}

}  // namespace

std::pair<KvMemory, CompressionReport> baseline_compress(const ToyTransformer& model,
                                                         const std::vector<Demonstration>& demos,
                                                         const BaselineSpec& spec,
                                                         const ChunkPlan& plan,
                                                         const PromptLayout& layout) {
    spec.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const int L = model.config.num_layers;

    KvMemory memory = KvMemory::empty(L, model.config.d_model);
    CompressionReport report;
    int64_t position = 0;
    for (int k = 0; k < plan.chunk_count(); ++k) {
        ChunkInput chunk = make_chunk_input(slice(demos, plan.ranges[k]), layout, k, position);
        const int S = static_cast<int>(chunk.tokens.size());
        if (spec.rho * S < 1.0) {
            throw std::invalid_argument("baseline_compress: budget below one token per layer");
        }
        const int per_layer = static_cast<int>(std::floor(spec.rho * S + 1e-9));

        TokenBlock block{chunk.tokens, chunk.roles, chunk.start_position, chunk.chunk_index};
        KvMemory chunk_kv = extract_kv(model, memory, block);

        ImportanceScores beta;
        if (spec.kind != BaselineKind::InitialRecent) {
            const int T = static_cast<int>(chunk.demo_rows[0].size());
            std::vector<int64_t> positions(T);
            for (int t = 0; t < T; ++t) positions[t] = chunk.start_position + S + t;
            TraceFlags flags;
            flags.attention = true;
            const KvMemory scoring_mem = concat(memory, chunk_kv);
            ForwardTrace trace =
                forward_batch(model, scoring_mem, chunk.demo_rows, positions, flags);
            const std::vector<int> window =
                window_indices(chunk.row_spans, T, ObservationWindow::Answer);
            std::vector<int> chunk_begin(L);
            for (int l = 0; l < L; ++l) chunk_begin[l] = memory.layers[l].count();
            beta = score_importance(trace, window, chunk_begin, S);
        }

        std::vector<int> budgets(L, per_layer);
        if (spec.kind == BaselineKind::Pyramid) {
            budgets = pyramid_budgets(per_layer * L, L, spec.pyramid_slope);
        }

        PruneReport chunk_report;
        chunk_report.chunk_len = S;
        chunk_report.entries_before = static_cast<int64_t>(L) * S;
        for (int l = L - 1; l >= 0; --l) {
            LayerSelection sel;
            if (spec.kind == BaselineKind::InitialRecent) {
                sel = initial_recent_selection(l, S, std::min(budgets[l], S), spec.sink);
            } else {
                sel = select_topk_count(beta, l, budgets[l], {});
            }
            prune_layer_inplace(chunk_kv, sel);
            LayerPruneRecord rec;
            rec.layer = l;
            rec.chosen_ratio = static_cast<double>(sel.kept.size()) / S;
            rec.retained = static_cast<int>(sel.kept.size());
            rec.chunk_len = S;
            chunk_report.layers.push_back(std::move(rec));
        }
        chunk_report.entries_after = static_cast<int64_t>(chunk_kv.total_entries());
        report.chunks.push_back(std::move(chunk_report));

        memory = concat(memory, chunk_kv);
        position += S;
    }

    report.context_tokens = context_token_count(demos, layout);
    report.entries_before = report.context_tokens * L;
    report.entries_after = static_cast<int64_t>(memory.total_entries());
    report.ratio = static_cast<double>(report.entries_after) /
                   static_cast<double>(report.entries_before);
    report.mean_kept_per_layer = static_cast<double>(report.entries_after) / L;
    report.kept = role_census(memory);
    report.removed = census_diff(full_context_census(demos, layout, L), report.kept);
    report.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    return {std::move(memory), std::move(report)};
}

}  // namespace lapkv
