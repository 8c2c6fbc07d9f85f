#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lapkv/checkpoint.hpp"
#include "lapkv/harness.hpp"

using namespace lapkv;

namespace {

ModelConfig io_model_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.d_model = 8;
    cfg.vocab_size = 16;
    return cfg;
}

}  // namespace

TEST_CASE("model checkpoints round-trip bit-exactly") {
    ModelConfig cfg = io_model_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 77);
    const std::string path = "io_model.ckpt";
    save_model(path, model);
    ToyTransformer loaded = load_model(path);

    CHECK(loaded.config.num_layers == cfg.num_layers);
    CHECK(loaded.config.rope_base == cfg.rope_base);
    CHECK(loaded.embed.data == model.embed.data);
    CHECK(loaded.layers[1].w_down.data == model.layers[1].w_down.data);

    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    ForwardTrace a = forward(model, empty, {1, 2, 3}, {});
    ForwardTrace b = forward(loaded, empty, {1, 2, 3}, {});
    CHECK(a.logits[0].data == b.logits[0].data);
    std::remove(path.c_str());
}

TEST_CASE("memory snapshots round-trip and keep metadata") {
    ModelConfig cfg = io_model_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 78);
    TokenBlock block;
    block.tokens = {1, 2, 3, 4};
    block.roles = {TokenRole::System, TokenRole::Image, TokenRole::Question, TokenRole::Answer};
    block.start_position = 0;
    block.chunk_index = 2;
    KvMemory mem = extract_kv(model, KvMemory::empty(cfg.num_layers, cfg.d_model), block);

    const std::string path = "io_memory.ckpt";
    save_memory(path, mem);
    KvMemory loaded = load_memory(path);
    CHECK(loaded.num_layers() == mem.num_layers());
    for (int l = 0; l < mem.num_layers(); ++l) {
        CHECK(loaded.layers[l].keys.data == mem.layers[l].keys.data);
        CHECK(loaded.layers[l].positions == mem.layers[l].positions);
        CHECK(loaded.layers[l].roles == mem.layers[l].roles);
        CHECK(loaded.layers[l].source_chunk == mem.layers[l].source_chunk);
    }
    std::remove(path.c_str());
}

TEST_CASE("containers reject foreign files and wrong kinds") {
    const std::string path = "io_bogus.ckpt";
    {
        std::ofstream out(path, std::ios::binary);
        out << "definitely not a container";
    }
    CHECK_THROWS_AS(Container::load(path), std::runtime_error);
    std::remove(path.c_str());

    ModelConfig cfg = io_model_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 79);
    const std::string mpath = "io_model2.ckpt";
    save_model(mpath, model);
    CHECK_THROWS_AS(load_memory(mpath), std::runtime_error);
    std::remove(mpath.c_str());
}

TEST_CASE("config files parse values, lists and comments") {
    KvConfig cfg = KvConfig::from_string(
        "# experiment\n"
        "task.kind = recall\n"
        "policy.delta = 0.01  # inline comment\n"
        "policy.ratios = 0.1, 0.5, 1.0\n"
        "seeds = 1,2,3\n"
        "policy.retain_all_answers = false\n");
    CHECK(cfg.get_string("task.kind", "") == "recall");
    CHECK(cfg.get_double("policy.delta", 0.0) == doctest::Approx(0.01));
    CHECK(cfg.get_double_list("policy.ratios", {}) == std::vector<double>{0.1, 0.5, 1.0});
    CHECK(cfg.get_int_list("seeds", {}) == std::vector<int>{1, 2, 3});
    CHECK(cfg.get_bool("policy.retain_all_answers", true) == false);
    CHECK(cfg.get_int("missing.key", 7) == 7);
}

TEST_CASE("config errors carry the field name") {
    KvConfig cfg = KvConfig::from_string("policy.delta = not_a_number\n");
    try {
        cfg.get_double("policy.delta", 0.0);
        CHECK(false);
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("policy.delta") != std::string::npos);
    }
    CHECK_THROWS_AS(KvConfig::from_string("no equals sign here\n"), std::invalid_argument);
}

TEST_CASE("experiment configs reject unknown keys and bad enums") {
    CHECK_THROWS_AS(ExperimentConfig::from_config(KvConfig::from_string("task.knid = recall\n")),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        ExperimentConfig::from_config(KvConfig::from_string("policy.window = sometimes\n")),
        std::invalid_argument);
    ExperimentConfig cfg =
        ExperimentConfig::from_config(KvConfig::from_string("task.kind = recall\n"));
    CHECK(cfg.task.kind == TaskKind::AssociativeRecall);
    CHECK(cfg.model.vocab_size == cfg.task.vocab().vocab_size);
    CHECK(cfg.trainer.target_lo == cfg.task.vocab().label_begin);
}

TEST_CASE("fixed float formatting is stable") {
    CHECK(fmt_g9(1.0) == "1");
    CHECK(fmt_g9(0.005) == "0.005");
    CHECK(fmt_g9(1.0 / 3.0) == "0.333333333");
}

TEST_CASE("report merging rejects schema mismatches") {
    namespace fs = std::filesystem;
    const std::string good = "io_results_good.csv";
    const std::string bad = "io_results_bad.csv";
    {
        std::ofstream out(good);
        out << "schema,method,seed,delta,n_demos,chunk_budget,ratio,context_before,"
               "context_after,accuracy,mean_js\n";
        out << "results_v1,full,1,0.005,8,64,1,100,100,0.5,0\n";
        out << "results_v1,lap,1,0.005,8,64,0.4,100,40,0.5,0.001\n";
    }
    {
        std::ofstream out(bad);
        out << "schema,method,seed,delta,n_demos,chunk_budget,ratio,context_before,"
               "context_after,accuracy,mean_js\n";
        out << "results_v99,full,1,0.005,8,64,1,100,100,0.5,0\n";
    }
    const std::string table = run_report({good}, "");
    CHECK(table.find("full") != std::string::npos);
    CHECK(table.find("lap") != std::string::npos);
    CHECK_THROWS_AS(run_report({bad}, ""), std::runtime_error);
    CHECK_THROWS_AS(run_report({"does_not_exist.csv"}, ""), std::runtime_error);
    std::remove(good.c_str());
    std::remove(bad.c_str());
}
