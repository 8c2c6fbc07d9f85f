#include "lapkv/compressor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace lapkv {

ChunkPlan plan_chunks(const std::vector<Demonstration>& demos, int64_t budget_tokens) {
    if (demos.empty()) throw std::invalid_argument("plan_chunks: no demonstrations");
    ChunkPlan plan;
    plan.budget_tokens = budget_tokens;
    int begin = 0;
    int64_t used = 0;
    for (int i = 0; i < static_cast<int>(demos.size()); ++i) {
        const int64_t len = static_cast<int64_t>(demos[i].token_count());
        if (len > budget_tokens) {
            throw std::invalid_argument("plan_chunks: a single demonstration exceeds the budget");
        }
        if (used + len > budget_tokens) {
            plan.ranges.emplace_back(begin, i);
            begin = i;
            used = 0;
        }
        used += len;
    }
    plan.ranges.emplace_back(begin, static_cast<int>(demos.size()));
    return plan;
}

ChunkPlan plan_chunk_count(const std::vector<Demonstration>& demos, int k) {
    const int n = static_cast<int>(demos.size());
    if (k < 1 || k > n) throw std::invalid_argument("plan_chunk_count: bad chunk count");
    ChunkPlan plan;
    int begin = 0;
    for (int c = 0; c < k; ++c) {
        const int take = n / k + (c < n % k ? 1 : 0);
        plan.ranges.emplace_back(begin, begin + take);
        begin += take;
    }
    plan.budget_tokens = 0;
    for (auto [b, e] : plan.ranges) {
        int64_t len = 0;
        for (int i = b; i < e; ++i) len += static_cast<int64_t>(demos[i].token_count());
        plan.budget_tokens = std::max(plan.budget_tokens, len);
    }
    return plan;
}

int64_t context_token_count(const std::vector<Demonstration>& demos,
                            const PromptLayout& layout) {
    int64_t n = static_cast<int64_t>(layout.system_tokens.size());
    for (const Demonstration& d : demos) n += static_cast<int64_t>(d.token_count());
    return n;
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

}  // namespace

std::pair<KvMemory, CompressionReport> compress(const ToyTransformer& model,
                                                const std::vector<Demonstration>& demos,
                                                const RetentionPolicy& policy,
                                                const ChunkPlan& plan,
                                                const PromptLayout& layout) {
    const auto t0 = std::chrono::steady_clock::now();
    const int L = model.config.num_layers;

    KvMemory memory = KvMemory::empty(L, model.config.d_model);
    CompressionReport report;
    int64_t position = 0;
    for (int k = 0; k < plan.chunk_count(); ++k) {
        ChunkInput chunk = make_chunk_input(slice(demos, plan.ranges[k]), layout, k, position);
        const int64_t chunk_len = static_cast<int64_t>(chunk.tokens.size());
        auto [next, chunk_report] = lap_compress(model, memory, chunk, policy);
        memory = std::move(next);
        report.chunks.push_back(std::move(chunk_report));
        position = policy.renumber_positions ? memory.max_position() + 1 : position + chunk_len;
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

KvMemory extract_full(const ToyTransformer& model, const std::vector<Demonstration>& demos,
                      const ChunkPlan& plan, const PromptLayout& layout) {
    const int L = model.config.num_layers;
    KvMemory memory = KvMemory::empty(L, model.config.d_model);
    int64_t position = 0;
    for (int k = 0; k < plan.chunk_count(); ++k) {
        ChunkInput chunk = make_chunk_input(slice(demos, plan.ranges[k]), layout, k, position);
        TokenBlock block{chunk.tokens, chunk.roles, chunk.start_position, chunk.chunk_index};
        memory = concat(memory, extract_kv(model, memory, block));
        position += static_cast<int64_t>(chunk.tokens.size());
    }
    return memory;
}

KvMemory restrict_to_chunk(const KvMemory& memory, int chunk_index) {
    KvMemory out = memory;
    for (int l = 0; l < memory.num_layers(); ++l) {
        LayerSelection sel;
        sel.layer = l;
        const KvLayer& layer = memory.layers[l];
        for (int i = 0; i < layer.count(); ++i) {
            if (layer.source_chunk[i] == chunk_index) sel.kept.push_back(i);
        }
        prune_layer_inplace(out, sel);
    }
    return out;
}

namespace {

std::vector<int> query_prefix(const Demonstration& query, const PromptLayout& layout) {
    std::vector<int> toks;
    toks.push_back(layout.image_delim);
    toks.insert(toks.end(), query.image.begin(), query.image.end());
    toks.push_back(layout.question_delim);
    toks.insert(toks.end(), query.question.begin(), query.question.end());
    toks.push_back(layout.answer_delim);
    return toks;
}

}  // namespace

std::vector<int> answer(const ToyTransformer& model, const KvMemory& memory,
                        const Demonstration& query, const PromptLayout& layout,
                        int64_t start_position, int max_new) {
    std::vector<int> toks = query_prefix(query, layout);
    std::vector<int> generated;
    for (int step = 0; step < max_new; ++step) {
        std::vector<int64_t> positions(toks.size());
        for (size_t t = 0; t < toks.size(); ++t) {
            positions[t] = start_position + static_cast<int64_t>(t);
        }
        ForwardTrace trace = forward(model, memory, toks, positions, {});
        const Matrix& logits = trace.logits[0];
        const double* row = logits.row(logits.rows - 1);
        const int next = static_cast<int>(std::max_element(row, row + logits.cols) - row);
        generated.push_back(next);
        toks.push_back(next);
    }
    return generated;
}

double evaluate_accuracy(const ToyTransformer& model, const KvMemory& memory,
                         const std::vector<Demonstration>& queries, const PromptLayout& layout,
                         int64_t start_position, int threads) {
    if (queries.empty()) throw std::invalid_argument("evaluate_accuracy: no queries");
    std::vector<char> hit(queries.size(), 0);
    auto worker = [&](size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            const Demonstration& q = queries[i];
            const std::vector<int> got =
                answer(model, memory, q, layout, start_position,
                       static_cast<int>(q.answer.size()));
            hit[i] = (got == q.answer) ? 1 : 0;
        }
    };
    threads = std::max(1, threads);
    if (threads == 1) {
        worker(0, queries.size());
    } else {
        std::vector<std::thread> pool;
        const size_t per = (queries.size() + threads - 1) / threads;
        for (int w = 0; w < threads; ++w) {
            const size_t b = std::min(queries.size(), w * per);
            const size_t e = std::min(queries.size(), b + per);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }
    int64_t correct = 0;
    for (char h : hit) correct += h;
    return static_cast<double>(correct) / static_cast<double>(queries.size());
}

namespace {

// Teacher-forced answer distributions of each query row under one memory.
std::vector<AnswerDistributions> query_distributions(const ToyTransformer& model,
                                                     const KvMemory& memory,
                                                     const std::vector<Demonstration>& queries,
                                                     const PromptLayout& layout,
                                                     int64_t start_position) {
    std::vector<std::vector<int>> rows;
    std::vector<DemoSpans> spans;
    rows.reserve(queries.size());
    for (const Demonstration& q : queries) {
        AssembledContext row = assemble_context({q}, layout, /*include_system=*/false);
        rows.push_back(std::move(row.tokens));
        spans.push_back(row.spans.front());
    }
    const int T = static_cast<int>(rows[0].size());
    std::vector<int64_t> positions(T);
    for (int t = 0; t < T; ++t) positions[t] = start_position + t;
    ForwardTrace trace = forward_batch(model, memory, rows, positions, {});

    std::vector<AnswerDistributions> out;
    out.reserve(queries.size());
    for (size_t r = 0; r < queries.size(); ++r) {
        std::vector<int> pred;
        for (int t = spans[r].answer.begin; t < spans[r].answer.end - 1; ++t) {
            pred.push_back(static_cast<int>(r) * T + t);
        }
        out.push_back(answer_distributions(trace, pred));
    }
    return out;
}

}  // namespace

std::vector<double> answer_js_per_query(const ToyTransformer& model, const KvMemory& memory_a,
                                        const KvMemory& memory_b,
                                        const std::vector<Demonstration>& queries,
                                        const PromptLayout& layout, int64_t start_position) {
    if (queries.empty()) throw std::invalid_argument("answer_js_per_query: no queries");
    const auto pa = query_distributions(model, memory_a, queries, layout, start_position);
    const auto pb = query_distributions(model, memory_b, queries, layout, start_position);
    std::vector<double> js(queries.size());
    for (size_t i = 0; i < queries.size(); ++i) js[i] = aggregate_js(pa[i], pb[i]);
    return js;
}

BoundEstimate measure_bound(const ToyTransformer& model,
                            const std::vector<Demonstration>& demos,
                            const std::vector<Demonstration>& eval_demos,
                            const RetentionPolicy& policy, const ChunkPlan& plan,
                            const PromptLayout& layout) {
    auto [compressed, report] = compress(model, demos, policy, plan, layout);
    return measure_bound_on(model, demos, eval_demos, policy, plan, layout, compressed);
}

BoundEstimate measure_bound_on(const ToyTransformer& model,
                               const std::vector<Demonstration>& demos,
                               const std::vector<Demonstration>& eval_demos,
                               const RetentionPolicy& policy, const ChunkPlan& plan,
                               const PromptLayout& layout, const KvMemory& compressed) {
    if (eval_demos.empty()) throw std::invalid_argument("measure_bound: empty eval set");

    const KvMemory full = extract_full(model, demos, plan, layout);
    const KvMemory first_chunk = restrict_to_chunk(full, 0);
    const int64_t start = context_token_count(demos, layout);

    const auto js_comp =
        answer_js_per_query(model, full, compressed, eval_demos, layout, start);
    const auto js_first =
        answer_js_per_query(model, full, first_chunk, eval_demos, layout, start);

    BoundEstimate est;
    est.chunk_count = plan.chunk_count();
    est.delta = policy.delta;
    for (double v : js_comp) est.delta_hat += v;
    est.delta_hat /= static_cast<double>(js_comp.size());
    for (double v : js_first) est.epsilon_hat += v;
    est.epsilon_hat /= static_cast<double>(js_first.size());
    est.global_distance = std::sqrt(est.delta_hat);
    est.epsilon_distance = std::sqrt(est.epsilon_hat);
    est.gamma = est.delta_hat / policy.delta;
    est.bound_rhs = (est.chunk_count - 1) * std::sqrt(policy.delta) + est.epsilon_distance;
    return est;
}

}  // namespace lapkv
