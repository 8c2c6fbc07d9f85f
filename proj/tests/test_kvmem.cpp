#include "doctest.h"
#include "lapkv/kvmem.hpp"
#include "lapkv/model.hpp"

using namespace lapkv;

namespace {

ModelConfig cfg_of(int layers = 3) {
    ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.num_heads = 2;
    cfg.d_model = 12;
    cfg.vocab_size = 20;
    return cfg;
}

TokenBlock block_of(const std::vector<int>& tokens, int64_t start, int chunk,
                    TokenRole role = TokenRole::Image) {
    TokenBlock b;
    b.tokens = tokens;
    b.roles.assign(tokens.size(), role);
    b.start_position = start;
    b.chunk_index = chunk;
    return b;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    double mx = 0.0;
    for (size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a.data[i] - b.data[i]));
    return mx;
}

}  // namespace

TEST_CASE("extract_kv produces one entry per token at every layer") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 1);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    KvMemory mem = extract_kv(model, empty, block_of({1, 2, 3, 4, 5}, 0, 0));
    for (int l = 0; l < cfg.num_layers; ++l) {
        CHECK(mem.layers[l].count() == 5);
        CHECK(mem.layers[l].positions == std::vector<int64_t>{0, 1, 2, 3, 4});
    }
    CHECK_NOTHROW(mem.validate());
}

TEST_CASE("extract then concat matches a single raw-sequence forward") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 2);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);

    const std::vector<int> all{4, 9, 1, 7, 3, 8, 2, 6};
    ForwardTrace whole = forward(model, empty, all, {});

    KvMemory a = extract_kv(model, empty, block_of({4, 9, 1}, 0, 0));
    KvMemory ab = concat(a, extract_kv(model, a, block_of({7, 3, 8, 2}, 3, 1)));
    ForwardTrace probe = forward(model, ab, {6}, std::vector<int64_t>{7}, {});

    double mx = 0.0;
    for (int v = 0; v < cfg.vocab_size; ++v) {
        mx = std::max(mx, std::abs(probe.logits[0].at(0, v) - whole.logits[0].at(7, v)));
    }
    CHECK(mx < 1e-5);
}

TEST_CASE("extraction is conditioned on the previous memory") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 3);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    KvMemory prev_a = extract_kv(model, empty, block_of({1, 1, 1}, 0, 0));
    KvMemory prev_b = extract_kv(model, empty, block_of({9, 9, 9}, 0, 0));

    KvMemory chunk_a = extract_kv(model, prev_a, block_of({5, 6}, 3, 1));
    KvMemory chunk_b = extract_kv(model, prev_b, block_of({5, 6}, 3, 1));
    // keys of layer 0 are identical (layer 0 sees raw embeddings), but values
    // deeper in the stack must differ
    double mx = 0.0;
    for (int l = 1; l < cfg.num_layers; ++l) {
        mx = std::max(mx, max_abs_diff(chunk_a.layers[l].keys, chunk_b.layers[l].keys));
    }
    CHECK(mx > 0.0);
}

TEST_CASE("concat with empty is the identity and lengths add") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 4);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    KvMemory x = extract_kv(model, empty, block_of({1, 2, 3}, 0, 0));
    KvMemory y = extract_kv(model, x, block_of({4, 5}, 3, 1));

    KvMemory xe = concat(x, empty);
    CHECK(xe.total_entries() == x.total_entries());
    CHECK(max_abs_diff(xe.layers[0].keys, x.layers[0].keys) == 0.0);

    KvMemory xy = concat(x, y);
    for (int l = 0; l < cfg.num_layers; ++l) CHECK(xy.layers[l].count() == 5);
}

TEST_CASE("concat is associative") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 5);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    KvMemory a = extract_kv(model, empty, block_of({1, 2}, 0, 0));
    KvMemory b = extract_kv(model, a, block_of({3, 4}, 2, 1));
    KvMemory c = extract_kv(model, concat(a, b), block_of({5}, 4, 2));

    KvMemory left = concat(concat(a, b), c);
    KvMemory right = concat(a, concat(b, c));
    for (int l = 0; l < cfg.num_layers; ++l) {
        CHECK(left.layers[l].positions == right.layers[l].positions);
        CHECK(max_abs_diff(left.layers[l].keys, right.layers[l].keys) == 0.0);
        CHECK(max_abs_diff(left.layers[l].values, right.layers[l].values) == 0.0);
    }
}

TEST_CASE("concat rejects interleaved positions") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 6);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    KvMemory a = extract_kv(model, empty, block_of({1, 2, 3}, 0, 0));
    KvMemory b = extract_kv(model, empty, block_of({4, 5}, 1, 1));  // overlaps a
    CHECK_THROWS_AS(concat(a, b), std::invalid_argument);
}

TEST_CASE("prune_layer keeps metadata and ignores other layers") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 7);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    KvMemory mem = extract_kv(model, empty, block_of({1, 2, 3}, 0, 0));
    mem.layers[1].roles = {TokenRole::System, TokenRole::Question, TokenRole::Answer};

    LayerSelection sel;
    sel.layer = 1;
    sel.kept = {0, 2};
    KvMemory pruned = prune_layer(mem, sel);
    CHECK(pruned.layers[0].count() == 3);
    CHECK(pruned.layers[1].count() == 2);
    CHECK(pruned.layers[2].count() == 3);
    CHECK(pruned.layers[1].positions == std::vector<int64_t>{0, 2});
    CHECK(pruned.layers[1].roles[0] == TokenRole::System);
    CHECK(pruned.layers[1].roles[1] == TokenRole::Answer);

    // keep-all is the identity
    LayerSelection all;
    all.layer = 0;
    all.kept = {0, 1, 2};
    KvMemory same = prune_layer(mem, all);
    CHECK(max_abs_diff(same.layers[0].keys, mem.layers[0].keys) == 0.0);

    // empty keeps are rejected
    LayerSelection none;
    none.layer = 0;
    CHECK_THROWS_AS(prune_layer(mem, none), std::invalid_argument);

    LayerSelection oob;
    oob.layer = 0;
    oob.kept = {3};
    CHECK_THROWS_AS(prune_layer(mem, oob), std::invalid_argument);
}

TEST_CASE("pruning is idempotent") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 8);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    KvMemory mem = extract_kv(model, empty, block_of({1, 2, 3, 4}, 0, 0));

    LayerSelection sel;
    sel.layer = 2;
    sel.kept = {1, 3};
    KvMemory once = prune_layer(mem, sel);
    LayerSelection again;
    again.layer = 2;
    again.kept = {0, 1};  // same survivors, new indices
    KvMemory twice = prune_layer(once, again);
    CHECK(twice.layers[2].positions == once.layers[2].positions);
    CHECK(max_abs_diff(twice.layers[2].keys, once.layers[2].keys) == 0.0);
}

TEST_CASE("pruning commutes with concatenation under index shift") {
    ModelConfig cfg = cfg_of();
    ToyTransformer model = ToyTransformer::random_init(cfg, 9);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    KvMemory a = extract_kv(model, empty, block_of({1, 2, 3}, 0, 0));
    KvMemory b = extract_kv(model, a, block_of({4, 5, 6}, 3, 1));

    // prune b's layer 1 then concat, vs concat then prune shifted indices
    LayerSelection sel_b;
    sel_b.layer = 1;
    sel_b.kept = {0, 2};
    KvMemory path1 = concat(a, prune_layer(b, sel_b));

    LayerSelection sel_joined;
    sel_joined.layer = 1;
    sel_joined.kept = {0, 1, 2, 3, 5};  // all of a plus shifted survivors of b
    KvMemory path2 = prune_layer(concat(a, b), sel_joined);

    CHECK(path1.layers[1].positions == path2.layers[1].positions);
    CHECK(max_abs_diff(path1.layers[1].keys, path2.layers[1].keys) == 0.0);
}

TEST_CASE("role census counts and conserves") {
    ModelConfig cfg = cfg_of(2);
    ToyTransformer model = ToyTransformer::random_init(cfg, 10);
    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    TokenBlock block;
    block.tokens = {1, 2, 3, 4, 5, 6, 7, 8};
    block.roles = {TokenRole::Image, TokenRole::Image, TokenRole::Image, TokenRole::Image,
                   TokenRole::Image, TokenRole::Answer, TokenRole::Answer, TokenRole::Answer};
    block.start_position = 0;
    block.chunk_index = 0;
    KvMemory mem = extract_kv(model, empty, block);

    RoleCensus pre = role_census(mem);
    CHECK(pre.totals[static_cast<int>(TokenRole::Image)] == 10);  // 5 per layer, 2 layers
    CHECK(pre.totals[static_cast<int>(TokenRole::Answer)] == 6);

    LayerSelection sel;
    sel.layer = 0;
    sel.kept = {4, 5, 6, 7};  // drop 4 image tokens at layer 0
    KvMemory pruned = prune_layer(mem, sel);
    RoleCensus post = role_census(pruned);
    RoleCensus removed = census_diff(pre, post);
    CHECK(removed.totals[static_cast<int>(TokenRole::Image)] == 4);
    CHECK(removed.totals[static_cast<int>(TokenRole::Answer)] == 0);
    for (int r = 0; r < 4; ++r) {
        CHECK(post.totals[r] + removed.totals[r] == pre.totals[r]);
        for (int l = 0; l < cfg.num_layers; ++l) {
            CHECK(post.per_layer[l][r] + removed.per_layer[l][r] == pre.per_layer[l][r]);
        }
    }
}
