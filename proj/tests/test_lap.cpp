#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "lapkv/compressor.hpp"
#include "lapkv/lap.hpp"
#include "lapkv/taskgen.hpp"

using namespace lapkv;

namespace {

TaskSpec lap_task(uint64_t seed = 3) {
    TaskSpec s;
    s.kind = TaskKind::SyntheticClassification;
    s.num_classes = 3;
    s.image_len = 6;
    s.question_len = 2;
    s.answer_len = 2;
    s.image_alphabet = 12;
    s.noise = 0.1;
    s.seed = seed;
    return s;
}

ModelConfig lap_model(const TaskSpec& task) {
    ModelConfig cfg;
    cfg.num_layers = 4;
    cfg.num_heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = task.vocab().vocab_size;
    return cfg;
}

ChunkInput first_chunk(const TaskSpec& task, int n_demos) {
    TaskData data = generate(task, 1, n_demos, 1);
    return make_chunk_input(data.demos, task.prompt_layout(), 0, 0);
}

// Fresh full forward of the demonstration batch given a memory; the
// verification oracle for the incremental pruning path.
double posthoc_js(const ToyTransformer& model, const KvMemory& baseline_mem,
                  const KvMemory& compressed_mem, const ChunkInput& chunk) {
    const int T = static_cast<int>(chunk.demo_rows[0].size());
    const int S = static_cast<int>(chunk.tokens.size());
    std::vector<int64_t> positions(T);
    for (int t = 0; t < T; ++t) positions[t] = chunk.start_position + S + t;
    const std::vector<int> pred = answer_logit_indices(chunk.row_spans, T);
    ForwardTrace a = forward_batch(model, baseline_mem, chunk.demo_rows, positions, {});
    ForwardTrace b = forward_batch(model, compressed_mem, chunk.demo_rows, positions, {});
    return aggregate_js(answer_distributions(a, pred), answer_distributions(b, pred));
}

}  // namespace

TEST_CASE("importance scores from a synthetic trace") {
    // two layers, one batch row, three query positions, chunk of four columns
    ForwardTrace trace;
    const int T = 3, S = 4;
    trace.attention.resize(2);
    for (int l = 0; l < 2; ++l) {
        trace.attention[l].resize(1);
        trace.attention[l][0] = Matrix(T, S + T);
    }
    // one-hot: window row 1 puts all mass on chunk column 2
    trace.attention[0][0].at(1, 2) = 1.0;
    // uniform rows at layer 1
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < S; ++j) trace.attention[1][0].at(t, j) = 1.0 / S;
    }

    ImportanceScores one = score_importance(trace, {1}, {0, 0}, S);
    CHECK(one.per_layer[0][2] == doctest::Approx(1.0));
    CHECK(one.per_layer[0][0] == doctest::Approx(0.0));

    ImportanceScores uni = score_importance(trace, {0, 1, 2}, {0, 0}, S);
    for (int j = 0; j < S; ++j) {
        CHECK(uni.per_layer[1][j] == doctest::Approx(3.0 / S));
    }
    CHECK_THROWS_AS(score_importance(trace, {}, {0, 0}, S), std::invalid_argument);
}

TEST_CASE("importance scores match a brute-force double loop") {
    Rng rng(17);
    ForwardTrace trace;
    const int T = 5, S = 7, prev = 3;
    trace.attention.resize(2);
    for (int l = 0; l < 2; ++l) {
        trace.attention[l].resize(2);
        for (int b = 0; b < 2; ++b) {
            trace.attention[l][b] = Matrix(T, prev + S + T);
            for (size_t i = 0; i < trace.attention[l][b].size(); ++i) {
                trace.attention[l][b].data[i] = rng.uniform();
            }
        }
    }
    const std::vector<int> window{1, 3, T + 2};  // rows of both batch items
    ImportanceScores scores = score_importance(trace, window, {prev, prev}, S);
    for (int l = 0; l < 2; ++l) {
        for (int j = 0; j < S; ++j) {
            double expected = 0.0;
            for (int flat : window) {
                expected += trace.attention[l][flat / T].at(flat % T, prev + j);
            }
            CHECK(scores.per_layer[l][j] == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("top-k selection obeys budget, ties and forced indices") {
    ImportanceScores scores;
    scores.per_layer = {{0.1, 0.9, 0.5}};
    CHECK(select_topk(scores, 0, 1.0, {}).kept == std::vector<int>{0, 1, 2});
    CHECK(select_topk(scores, 0, 1.0 / 3.0, {}).kept == std::vector<int>{1});

    ImportanceScores equal;
    equal.per_layer = {{1.0, 1.0, 1.0, 1.0}};
    CHECK(select_topk(equal, 0, 0.5, {}).kept == std::vector<int>{0, 1});

    // forced indices join the budgeted picks
    CHECK(select_topk(scores, 0, 1.0 / 3.0, {2}).kept == std::vector<int>{1, 2});
    // a tiny ratio still keeps one token
    CHECK(select_topk(scores, 0, 0.01, {}).kept == std::vector<int>{1});
    CHECK_THROWS_AS(select_topk(scores, 0, 0.0, {}), std::invalid_argument);
    CHECK_THROWS_AS(select_topk(scores, 1, 0.5, {}), std::invalid_argument);
}

TEST_CASE("observation windows are nested and cover the documented spans") {
    DemoSpans spans;
    spans.image = {0, 7};
    spans.question = {7, 10};
    spans.answer = {10, 12};
    const std::vector<DemoSpans> rows{spans, spans};
    const int T = 12;

    const auto ans = window_indices(rows, T, ObservationWindow::Answer);
    const auto qa = window_indices(rows, T, ObservationWindow::QuestionAnswer);
    const auto iqa = window_indices(rows, T, ObservationWindow::ImageQuestionAnswer);

    CHECK(ans == std::vector<int>{10, 11, 22, 23});
    CHECK(iqa.size() == 2 * T);
    auto subset = [](const std::vector<int>& a, const std::vector<int>& b) {
        for (int x : a) {
            if (std::find(b.begin(), b.end(), x) == b.end()) return false;
        }
        return true;
    };
    CHECK(subset(ans, qa));
    CHECK(subset(qa, iqa));

    // predictive positions drop the span's last element
    const auto pred = answer_logit_indices(rows, T);
    CHECK(pred == std::vector<int>{10, 22});
}

TEST_CASE("forced indices cover the final answer or all answers") {
    std::vector<TokenRole> roles{TokenRole::Image, TokenRole::Answer, TokenRole::Image,
                                 TokenRole::Answer};
    CHECK(forced_chunk_indices(roles, false) == std::vector<int>{3});
    CHECK(forced_chunk_indices(roles, true) == std::vector<int>{1, 3});
}

TEST_CASE("full-retention policy is the identity and registers zero divergence") {
    const TaskSpec task = lap_task();
    const ModelConfig mc = lap_model(task);
    ToyTransformer model = ToyTransformer::random_init(mc, 5);
    ChunkInput chunk = first_chunk(task, 4);

    RetentionPolicy policy;
    policy.ratios = {1.0};
    policy.delta = 0.005;
    KvMemory prev = KvMemory::empty(mc.num_layers, mc.d_model);
    auto [mem, report] = lap_compress(model, prev, chunk, policy);

    TokenBlock block{chunk.tokens, chunk.roles, 0, 0};
    KvMemory full = extract_kv(model, prev, block);
    REQUIRE(mem.num_layers() == full.num_layers());
    for (int l = 0; l < mem.num_layers(); ++l) {
        CHECK(mem.layers[l].count() == full.layers[l].count());
        CHECK(mem.layers[l].positions == full.layers[l].positions);
    }
    for (const LayerPruneRecord& rec : report.layers) {
        CHECK(rec.chosen_ratio == 1.0);
        for (double js : rec.attempted_js) CHECK(js <= 1e-9);
    }
    CHECK(report.entries_after == report.entries_before);
}

TEST_CASE("a maximal threshold accepts the smallest ratio everywhere") {
    const TaskSpec task = lap_task();
    const ModelConfig mc = lap_model(task);
    ToyTransformer model = ToyTransformer::random_init(mc, 6);
    ChunkInput chunk = first_chunk(task, 4);
    const int S = static_cast<int>(chunk.tokens.size());

    RetentionPolicy policy;
    policy.ratios = {0.1, 1.0};
    policy.delta = 1.0;  // base-2 divergence never exceeds 1
    policy.retain_all_answers = true;
    KvMemory prev = KvMemory::empty(mc.num_layers, mc.d_model);
    auto [mem, report] = lap_compress(model, prev, chunk, policy);

    const auto forced = forced_chunk_indices(chunk.roles, true);
    const int budget = static_cast<int>(std::floor(0.1 * S + 1e-9));
    for (const LayerPruneRecord& rec : report.layers) {
        CHECK(rec.chosen_ratio == 0.1);
        CHECK(rec.attempted_js.size() == 1);
        CHECK(rec.retained >= std::max(1, budget));
        CHECK(rec.retained <= budget + static_cast<int>(forced.size()));
    }
    for (int l = 0; l < mem.num_layers(); ++l) {
        // every forced answer token survived
        for (int f : forced) {
            bool present = false;
            for (int64_t p : mem.layers[l].positions) {
                if (p == chunk.start_position + f) present = true;
            }
            CHECK(present);
        }
    }
}

TEST_CASE("compressed memory passes a fresh post-hoc divergence check") {
    const TaskSpec task = lap_task(11);
    TaskSpec big = task;
    big.image_len = 6;
    const ModelConfig mc = lap_model(big);
    ToyTransformer model = ToyTransformer::random_init(mc, 7);
    ChunkInput chunk = first_chunk(big, 4);  // S ~ 50

    RetentionPolicy policy;  // default delta 0.005
    KvMemory prev = KvMemory::empty(mc.num_layers, mc.d_model);
    auto [mem, report] = lap_compress(model, prev, chunk, policy);

    TokenBlock block{chunk.tokens, chunk.roles, 0, 0};
    KvMemory full = concat(prev, extract_kv(model, prev, block));
    const double js = posthoc_js(model, full, mem, chunk);
    CHECK(js <= policy.delta + 1e-6);
}

TEST_CASE("the recorded ratio is the first attempt within the budget") {
    const TaskSpec task = lap_task(13);
    const ModelConfig mc = lap_model(task);
    ToyTransformer model = ToyTransformer::random_init(mc, 9);
    ChunkInput chunk = first_chunk(task, 5);

    RetentionPolicy policy;
    policy.delta = 0.01;
    KvMemory prev = KvMemory::empty(mc.num_layers, mc.d_model);
    auto [mem, report] = lap_compress(model, prev, chunk, policy);

    for (const LayerPruneRecord& rec : report.layers) {
        REQUIRE(!rec.attempted_js.empty());
        // every attempt before the accepted one exceeded the budget
        for (size_t i = 0; i + 1 < rec.attempted_js.size(); ++i) {
            CHECK(rec.attempted_js[i] > policy.delta);
        }
        const double last = rec.attempted_js.back();
        const bool accepted_within = last <= policy.delta;
        const bool exhausted = rec.attempted_ratios.back() == 1.0;
        CHECK((accepted_within || exhausted));
        CHECK(rec.chosen_ratio == rec.attempted_ratios.back());
    }
}

TEST_CASE("termination holds across random models") {
    const TaskSpec task = lap_task(17);
    const ModelConfig mc = lap_model(task);
    KvMemory prev = KvMemory::empty(mc.num_layers, mc.d_model);
    for (uint64_t seed = 0; seed < 5; ++seed) {
        ToyTransformer model = ToyTransformer::random_init(mc, 100 + seed);
        ChunkInput chunk = first_chunk(lap_task(20 + seed), 4);
        RetentionPolicy policy;
        policy.delta = 1e-4;  // tight budget forces full scans
        auto [mem, report] = lap_compress(model, prev, chunk, policy);
        for (const LayerPruneRecord& rec : report.layers) {
            const bool ok = rec.attempted_js.back() <= policy.delta || rec.chosen_ratio == 1.0;
            CHECK(ok);
        }
    }
}

TEST_CASE("larger budgets never retain more tokens") {
    const TaskSpec task = lap_task(23);
    const ModelConfig mc = lap_model(task);
    ToyTransformer model = ToyTransformer::random_init(mc, 31);
    ChunkInput chunk = first_chunk(task, 5);
    KvMemory prev = KvMemory::empty(mc.num_layers, mc.d_model);

    RetentionPolicy loose;
    loose.delta = 0.05;
    RetentionPolicy tight;
    tight.delta = 0.001;
    auto [mem_loose, rep_loose] = lap_compress(model, prev, chunk, loose);
    auto [mem_tight, rep_tight] = lap_compress(model, prev, chunk, tight);
    CHECK(mem_loose.total_entries() <= mem_tight.total_entries());
}

TEST_CASE("grouped layers share one retention ratio") {
    const TaskSpec task = lap_task(29);
    const ModelConfig mc = lap_model(task);
    ToyTransformer model = ToyTransformer::random_init(mc, 41);
    ChunkInput chunk = first_chunk(task, 4);
    KvMemory prev = KvMemory::empty(mc.num_layers, mc.d_model);

    RetentionPolicy policy;
    policy.group_size = 2;
    policy.delta = 0.02;
    auto [mem, report] = lap_compress(model, prev, chunk, policy);
    REQUIRE(report.layers.size() == static_cast<size_t>(mc.num_layers));
    // records come top-down; layers {3,2} and {1,0} share ratios
    CHECK(report.layers[0].chosen_ratio == report.layers[1].chosen_ratio);
    CHECK(report.layers[2].chosen_ratio == report.layers[3].chosen_ratio);
}

TEST_CASE("renumbered positions keep the memory usable") {
    const TaskSpec task = lap_task(37);
    const ModelConfig mc = lap_model(task);
    ToyTransformer model = ToyTransformer::random_init(mc, 43);
    ChunkInput chunk = first_chunk(task, 4);
    KvMemory prev = KvMemory::empty(mc.num_layers, mc.d_model);

    RetentionPolicy policy;
    policy.renumber_positions = true;
    auto [mem, report] = lap_compress(model, prev, chunk, policy);
    for (int l = 0; l < mem.num_layers(); ++l) {
        for (int i = 0; i < mem.layers[l].count(); ++i) {
            CHECK(mem.layers[l].positions[i] == i);
        }
    }
    CHECK_NOTHROW(mem.validate());
    // the memory still drives a forward pass
    ForwardTrace probe = forward(model, mem, {1, 2}, {});
    CHECK(probe.logits[0].rows == 2);

    // renumbering with no pruning is exactly a position shift of the keys;
    // with ratio 1.0 and positions already contiguous it is the identity
    RetentionPolicy ident;
    ident.ratios = {1.0};
    ident.renumber_positions = true;
    auto [mem_id, rep_id] = lap_compress(model, prev, chunk, ident);
    TokenBlock block{chunk.tokens, chunk.roles, 0, 0};
    KvMemory full = extract_kv(model, prev, block);
    for (int l = 0; l < mem_id.num_layers(); ++l) {
        double mx = 0.0;
        for (size_t i = 0; i < mem_id.layers[l].keys.size(); ++i) {
            mx = std::max(mx, std::abs(mem_id.layers[l].keys.data[i] -
                                       full.layers[l].keys.data[i]));
        }
        CHECK(mx < 1e-9);
    }
}
