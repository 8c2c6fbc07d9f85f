#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "lapkv/checkpoint.hpp"
#include "lapkv/harness.hpp"

using namespace lapkv;

namespace {

ExperimentConfig load_experiment(const std::string& config_path, const std::string& policy_arg) {
    KvConfig kv = config_path.empty() ? KvConfig::from_string("") : KvConfig::from_file(config_path);
    if (!policy_arg.empty() && policy_arg != "default") {
        // merge policy keys from a second config file
        KvConfig extra = KvConfig::from_file(policy_arg);
        for (const auto& [k, v] : extra.values) kv.values[k] = v;
        kv.source_text += "\n" + extra.source_text;
    }
    return ExperimentConfig::from_config(kv);
}

int run_train(const std::string& config_path, const std::string& out_path, int seed) {
    ExperimentConfig cfg = load_experiment(config_path, "");
    TaskSpec task = cfg.task;
    task.seed = static_cast<uint64_t>(seed);
    TaskData data = generate(task, cfg.n_train_sequences, cfg.n_demos, cfg.n_eval);
    TrainConfig tc = cfg.trainer;
    if (tc.log_every == 0) tc.log_every = 100;
    cfg.trainer = tc;
    ToyTransformer model = obtain_model(cfg, data, seed);
    save_model(out_path, model);
    std::printf("saved model to %s (%zu parameters)\n", out_path.c_str(),
                model.parameter_count());
    return 0;
}

int run_gen_data(const std::string& config_path, int seed, const std::string& demos_path,
                 const std::string& eval_path) {
    ExperimentConfig cfg = load_experiment(config_path, "");
    TaskSpec task = cfg.task;
    task.seed = static_cast<uint64_t>(seed);
    TaskData data = generate(task, 0, cfg.n_demos, cfg.n_eval);
    save_demos(demos_path, data.demos);
    save_demos(eval_path, data.eval);
    std::printf("wrote %zu demos to %s and %zu eval queries to %s\n", data.demos.size(),
                demos_path.c_str(), data.eval.size(), eval_path.c_str());
    return 0;
}

int run_eval(const std::string& config_path, const std::string& model_path,
             const std::string& memory_path, const std::string& data_path) {
    ExperimentConfig cfg = load_experiment(config_path, "");
    ToyTransformer model = load_model(model_path);
    std::vector<Demonstration> queries = load_demos(data_path);
    KvMemory memory;
    int64_t start = 0;
    if (memory_path == "none") {
        memory = KvMemory::empty(model.config.num_layers, model.config.d_model);
    } else {
        memory = load_memory(memory_path);
        start = memory.max_position() + 1;
    }
    const double acc = evaluate_accuracy(model, memory, queries, cfg.task.prompt_layout(), start,
                                         cfg.threads);
    std::printf("accuracy %.4f over %zu queries\n", acc, queries.size());
    return 0;
}

int run_inspect(const std::string& model_path) {
    ToyTransformer model = load_model(model_path);
    const ModelConfig& c = model.config;
    std::printf("layers        %d\n", c.num_layers);
    std::printf("heads         %d\n", c.num_heads);
    std::printf("d_model       %d\n", c.d_model);
    std::printf("vocab_size    %d\n", c.vocab_size);
    std::printf("max_position  %d\n", c.max_position);
    std::printf("rope_base     %g\n", c.rope_base);
    std::printf("attn_reduce   %s\n", c.attn_reduce == AttnReduce::Mean ? "mean" : "sum");
    std::printf("parameters    %zu\n", model.parameter_count());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"layer-adaptive KV cache compression workbench"};
    app.require_subcommand(1);

    std::string config_path, out_path = "model.ckpt", policy_arg;
    std::string model_path, memory_path = "none", data_path, out_dir = "out", axis = "delta";
    std::string merged_csv;
    std::vector<std::string> inputs;
    int seed = 1;

    auto* train_cmd = app.add_subcommand("train", "train a model on the configured task");
    train_cmd->add_option("--config", config_path, "experiment config file");
    train_cmd->add_option("--out", out_path, "checkpoint path to write");
    train_cmd->add_option("--seed", seed, "task and init seed");

    auto* gen = app.add_subcommand("gen-data", "generate demo and eval splits");
    gen->add_option("--config", config_path, "experiment config file");
    gen->add_option("--seed", seed, "generator seed");
    std::string demos_path = "demos.jsonl", eval_path = "eval.jsonl";
    gen->add_option("--out-demos", demos_path, "demo split path");
    gen->add_option("--out-eval", eval_path, "eval split path");

    auto* comp = app.add_subcommand("compress", "compress a demo context and compare methods");
    comp->add_option("--config", config_path, "experiment config file");
    comp->add_option("--policy", policy_arg, "'default' or a config file with policy.* keys");
    comp->add_option("--out-dir", out_dir, "output directory");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate accuracy of a model given a memory");
    eval_cmd->add_option("--config", config_path, "experiment config file");
    eval_cmd->add_option("--model", model_path, "model checkpoint")->required();
    eval_cmd->add_option("--memory", memory_path, "memory snapshot path or 'none'");
    eval_cmd->add_option("--data", data_path, "eval queries (jsonl)")->required();

    auto* sweep = app.add_subcommand("sweep", "run a sweep along one axis");
    sweep->add_option("--config", config_path, "experiment config file");
    sweep->add_option("--axis", axis, "delta | demos | budget | k");
    sweep->add_option("--out-dir", out_dir, "output directory");

    auto* rep = app.add_subcommand("report", "merge results CSVs and print a summary");
    rep->add_option("--out", merged_csv, "merged CSV path");
    rep->add_option("inputs", inputs, "results CSV files")->required();

    auto* model_cmd = app.add_subcommand("model", "model utilities");
    auto* inspect = model_cmd->add_subcommand("inspect", "print config and parameter counts");
    inspect->add_option("--model", model_path, "model checkpoint")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) return run_train(config_path, out_path, seed);
        if (*gen) return run_gen_data(config_path, seed, demos_path, eval_path);
        if (*comp) {
            ExperimentConfig cfg = load_experiment(config_path, policy_arg);
            cfg.out_dir = out_dir;
            run_compress(cfg);
            std::printf("wrote %s/results.csv\n", out_dir.c_str());
            return 0;
        }
        if (*eval_cmd) return run_eval(config_path, model_path, memory_path, data_path);
        if (*sweep) {
            ExperimentConfig cfg = load_experiment(config_path, "");
            cfg.out_dir = out_dir;
            run_sweep(cfg, axis);
            std::printf("wrote %s/results.csv\n", out_dir.c_str());
            return 0;
        }
        if (*rep) {
            std::fputs(run_report(inputs, merged_csv).c_str(), stdout);
            return 0;
        }
        if (*inspect) return run_inspect(model_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
