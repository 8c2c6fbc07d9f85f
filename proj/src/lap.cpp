#include "lapkv/lap.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lapkv {

const char* observation_window_name(ObservationWindow w) {
    switch (w) {
        case ObservationWindow::Answer: return "answer";
        case ObservationWindow::QuestionAnswer: return "question_answer";
        case ObservationWindow::ImageQuestionAnswer: return "image_question_answer";
    }
    return "unknown";
}

ObservationWindow observation_window_from_name(const std::string& name) {
    if (name == "answer") return ObservationWindow::Answer;
    if (name == "question_answer") return ObservationWindow::QuestionAnswer;
    if (name == "image_question_answer") return ObservationWindow::ImageQuestionAnswer;
    throw std::invalid_argument("unknown observation window: " + name);
}

void RetentionPolicy::validate() const {
    if (ratios.empty()) throw std::invalid_argument("RetentionPolicy: empty ratio set");
    for (size_t i = 0; i < ratios.size(); ++i) {
        if (!(ratios[i] > 0.0) || ratios[i] > 1.0) {
            throw std::invalid_argument("RetentionPolicy: ratios must lie in (0, 1]");
        }
        if (i > 0 && ratios[i] <= ratios[i - 1]) {
            throw std::invalid_argument("RetentionPolicy: ratios must be strictly ascending");
        }
    }
    if (ratios.back() != 1.0) {
        throw std::invalid_argument("RetentionPolicy: ratio set must end at 1.0");
    }
    if (!(delta > 0.0)) throw std::invalid_argument("RetentionPolicy: delta must be positive");
    if (group_size < 1) throw std::invalid_argument("RetentionPolicy: group_size must be >= 1");
}

ImportanceScores score_importance(const ForwardTrace& trace,
                                  const std::vector<int>& window_flat,
                                  const std::vector<int>& chunk_begin, int chunk_len) {
    if (window_flat.empty()) throw std::invalid_argument("score_importance: empty window");
    if (trace.attention.empty()) {
        throw std::invalid_argument("score_importance: trace has no attention capture");
    }
    const int L = static_cast<int>(trace.attention.size());
    if (static_cast<int>(chunk_begin.size()) != L) {
        throw std::invalid_argument("score_importance: chunk_begin size mismatch");
    }
    const int B = static_cast<int>(trace.attention[0].size());
    const int T = trace.attention[0][0].rows;

    ImportanceScores scores;
    scores.per_layer.assign(L, std::vector<double>(chunk_len, 0.0));
    for (int l = 0; l < L; ++l) {
        std::vector<double>& beta = scores.per_layer[l];
        for (int flat : window_flat) {
            const int b = flat / T;
            const int t = flat % T;
            if (b < 0 || b >= B || t < 0 || t >= T) {
                throw std::invalid_argument("score_importance: window position out of range");
            }
            const Matrix& att = trace.attention[l][b];
            if (chunk_begin[l] + chunk_len > att.cols) {
                throw std::invalid_argument("score_importance: chunk columns out of range");
            }
            const double* row = att.row(t) + chunk_begin[l];
            for (int j = 0; j < chunk_len; ++j) beta[j] += row[j];
        }
    }
    return scores;
}

LayerSelection select_topk(const ImportanceScores& scores, int layer, double ratio,
                           const std::vector<int>& forced) {
    if (!(ratio > 0.0) || ratio > 1.0) throw std::invalid_argument("select_topk: bad ratio");
    if (layer < 0 || layer >= static_cast<int>(scores.per_layer.size())) {
        throw std::invalid_argument("select_topk: layer out of range");
    }
    const int n = static_cast<int>(scores.per_layer[layer].size());
    // small epsilon guards floor against binary rounding of the ratio itself
    const int budget = static_cast<int>(std::floor(ratio * n + 1e-9));
    return select_topk_count(scores, layer, budget, forced);
}

LayerSelection select_topk_count(const ImportanceScores& scores, int layer, int count,
                                 const std::vector<int>& forced) {
    if (layer < 0 || layer >= static_cast<int>(scores.per_layer.size())) {
        throw std::invalid_argument("select_topk: layer out of range");
    }
    const std::vector<double>& beta = scores.per_layer[layer];
    const int n = static_cast<int>(beta.size());
    const int budget = std::clamp(count, 1, n);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&beta](int a, int b) {
        if (beta[a] != beta[b]) return beta[a] > beta[b];
        return a < b;  // earlier token wins ties
    });

    std::vector<char> keep(n, 0);
    for (int i = 0; i < budget; ++i) keep[order[i]] = 1;
    for (int f : forced) {
        if (f < 0 || f >= n) throw std::invalid_argument("select_topk: forced index out of range");
        keep[f] = 1;
    }

    LayerSelection sel;
    sel.layer = layer;
    for (int i = 0; i < n; ++i) {
        if (keep[i]) sel.kept.push_back(i);
    }
    return sel;
}

std::vector<int> window_indices(const std::vector<DemoSpans>& row_spans, int row_len,
                                ObservationWindow mode) {
    std::vector<int> out;
    for (size_t r = 0; r < row_spans.size(); ++r) {
        const DemoSpans& s = row_spans[r];
        const int base = static_cast<int>(r) * row_len;
        auto add = [&out, base](const SpanRange& span) {
            for (int t = span.begin; t < span.end; ++t) out.push_back(base + t);
        };
        if (mode == ObservationWindow::ImageQuestionAnswer) add(s.image);
        if (mode != ObservationWindow::Answer) add(s.question);
        add(s.answer);
    }
    return out;
}

std::vector<int> answer_logit_indices(const std::vector<DemoSpans>& row_spans, int row_len) {
    // the answer span opens with its delimiter, so dropping the span's last
    // element leaves exactly the positions that predict the answer tokens
    std::vector<int> out;
    for (size_t r = 0; r < row_spans.size(); ++r) {
        const SpanRange& a = row_spans[r].answer;
        const int base = static_cast<int>(r) * row_len;
        for (int t = a.begin; t < a.end - 1; ++t) out.push_back(base + t);
    }
    return out;
}

std::vector<int> forced_chunk_indices(const std::vector<TokenRole>& roles,
                                      bool retain_all_answers) {
    std::vector<int> forced;
    int last_answer = -1;
    for (int i = 0; i < static_cast<int>(roles.size()); ++i) {
        if (roles[i] == TokenRole::Answer) {
            last_answer = i;
            if (retain_all_answers) forced.push_back(i);
        }
    }
    if (!retain_all_answers && last_answer >= 0) forced.push_back(last_answer);
    return forced;
}

namespace {

// Rewrites positions to a compact 0..n-1 numbering per layer, re-rotating the
// stored keys by the position delta.
void renumber_memory(const ModelConfig& cfg, KvMemory& memory) {
    for (KvLayer& layer : memory.layers) {
        for (int i = 0; i < layer.count(); ++i) {
            const int64_t delta = static_cast<int64_t>(i) - layer.positions[i];
            if (delta != 0) rope_rotate(layer.keys.row(i), delta, cfg);
            layer.positions[i] = i;
        }
    }
}

}  // namespace

std::pair<KvMemory, PruneReport> lap_compress(const ToyTransformer& model,
                                              const KvMemory& memory_prev,
                                              const ChunkInput& chunk,
                                              const RetentionPolicy& policy) {
    policy.validate();
    const int L = model.config.num_layers;
    const int S = static_cast<int>(chunk.tokens.size());
    if (chunk.demo_rows.empty()) throw std::invalid_argument("lap_compress: no demonstrations");
    const int T = static_cast<int>(chunk.demo_rows[0].size());

    TokenBlock block{chunk.tokens, chunk.roles, chunk.start_position, chunk.chunk_index};
    KvMemory chunk_kv = extract_kv(model, memory_prev, block);

    // demonstration rows sit right after the chunk itself
    std::vector<int64_t> positions(T);
    for (int t = 0; t < T; ++t) positions[t] = chunk.start_position + S + t;

    TraceFlags flags;
    flags.attention = true;
    flags.hidden = true;
    const KvMemory scoring_mem = concat(memory_prev, chunk_kv);
    ForwardTrace trace = forward_batch(model, scoring_mem, chunk.demo_rows, positions, flags);

    const std::vector<int> window = window_indices(chunk.row_spans, T, policy.window);
    const std::vector<int> pred = answer_logit_indices(chunk.row_spans, T);
    const AnswerDistributions p_ori = answer_distributions(trace, pred);

    std::vector<int> chunk_begin(L);
    for (int l = 0; l < L; ++l) chunk_begin[l] = memory_prev.layers[l].count();
    ImportanceScores beta = score_importance(trace, window, chunk_begin, S);

    const std::vector<int> forced = forced_chunk_indices(chunk.roles, policy.retain_all_answers);

    KvMemory pruned = chunk_kv;
    PruneReport report;
    report.chunk_len = S;
    report.entries_before = static_cast<int64_t>(L) * S;

    for (int top = L - 1; top >= 0; top -= policy.group_size) {
        const int low = std::max(0, top - policy.group_size + 1);

        std::vector<double> attempted_ratios, attempted_js;
        double chosen = 1.0;
        for (double r : policy.ratios) {
            KvMemory candidate_chunk = pruned;
            for (int l = low; l <= top; ++l) {
                LayerSelection sel = select_topk(beta, l, r, forced);
                prune_layer_inplace(candidate_chunk, sel);
            }
            const KvMemory candidate = concat(memory_prev, candidate_chunk);
            ForwardTrace iter =
                forward_from_layer(model, candidate, trace.hidden[low], low, positions, {});
            const double js =
                aggregate_js(p_ori, answer_distributions(iter, pred), policy.js_aggregate);
            attempted_ratios.push_back(r);
            attempted_js.push_back(js);
            if (js <= policy.delta) {
                pruned = std::move(candidate_chunk);
                chosen = r;
                break;
            }
        }

        for (int l = top; l >= low; --l) {
            LayerPruneRecord rec;
            rec.layer = l;
            rec.chosen_ratio = chosen;
            rec.retained = pruned.layers[l].count();
            rec.chunk_len = S;
            rec.attempted_ratios = attempted_ratios;
            rec.attempted_js = attempted_js;
            report.layers.push_back(std::move(rec));
        }

        if (policy.refresh_scores && low > 0) {
            // re-score the still-unpruned layers against the updated chunk;
            // layers above low have fewer columns now and keep their scores
            TraceFlags f2;
            f2.attention = true;
            const KvMemory mem2 = concat(memory_prev, pruned);
            ForwardTrace t2 = forward_batch(model, mem2, chunk.demo_rows, positions, f2);
            for (int l = 0; l < low; ++l) {
                std::vector<double>& bl = beta.per_layer[l];
                std::fill(bl.begin(), bl.end(), 0.0);
                for (int flat : window) {
                    const Matrix& att = t2.attention[l][flat / T];
                    const double* row = att.row(flat % T) + chunk_begin[l];
                    for (int j = 0; j < S; ++j) bl[j] += row[j];
                }
            }
        }
    }

    report.entries_after = static_cast<int64_t>(pruned.total_entries());
    KvMemory out = concat(memory_prev, pruned);
    if (policy.renumber_positions) renumber_memory(model.config, out);
    return {std::move(out), std::move(report)};
}

}  // namespace lapkv
