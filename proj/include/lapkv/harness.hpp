#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapkv/baselines.hpp"
#include "lapkv/compressor.hpp"
#include "lapkv/taskgen.hpp"
#include "lapkv/train.hpp"

namespace lapkv {

// Plain-text configuration, one `key = value` per line. `#` starts a comment;
// blank lines are ignored; keys are dotted paths; list values are
// comma-separated. Unknown keys are rejected so typos fail loudly.
struct KvConfig {
    std::map<std::string, std::string> values;
    std::string source_text;

    static KvConfig from_file(const std::string& path);
    static KvConfig from_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    int64_t get_int64(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& fallback) const;
    std::vector<int> get_int_list(const std::string& key,
                                  const std::vector<int>& fallback) const;
};

struct ExperimentConfig {
    ModelConfig model;
    TaskSpec task;
    RetentionPolicy policy;
    TrainConfig trainer;

    int n_train_sequences = 768;
    int n_demos = 32;
    int n_eval = 64;
    int64_t chunk_budget = 256;

    std::vector<std::string> baselines{"uniform_topk", "pyramid", "initial_recent"};
    double pyramid_slope = 1.0;
    int sink = 4;

    std::vector<double> delta_axis{0.002, 0.005, 0.02};
    std::vector<int> demo_axis{0, 4, 16, 64};
    std::vector<int> budget_axis{128, 256, 512};
    std::vector<int> k_axis{1, 2, 4, 8};

    std::vector<int> seeds{1};
    std::string out_dir = "out";
    std::string model_path;  // optional checkpoint; empty = train in-process
    bool save_memory = false;
    int threads = 1;

    static ExperimentConfig from_config(const KvConfig& cfg);
    std::string config_text;
};

// %.9g formatting keeps CSV output byte-stable across runs.
std::string fmt_g9(double v);

inline constexpr const char* kResultsSchema = "results_v1";
inline constexpr const char* kLayersSchema = "layers_v1";
inline constexpr const char* kRolesSchema = "roles_v1";
inline constexpr const char* kBoundSchema = "bound_v1";

struct ResultRow {
    std::string method;
    int seed = 0;
    double delta = 0.0;
    int n_demos = 0;
    int64_t chunk_budget = 0;
    double ratio = 1.0;
    int64_t context_before = 0;
    double context_after = 0.0;
    double accuracy = 0.0;
    double mean_js = 0.0;
};

struct BoundRow {
    int seed = 0;
    int k = 1;
    double delta = 0.0;
    double delta_hat = 0.0;
    double global_distance = 0.0;
    double epsilon_hat = 0.0;
    double epsilon_distance = 0.0;
    double gamma = 0.0;
    double bound_rhs = 0.0;
};

// Loads the checkpoint when configured, otherwise trains a model on the
// task's training sequences. Deterministic per seed.
ToyTransformer obtain_model(const ExperimentConfig& cfg, const TaskData& data, int seed);

// One compression comparison per seed: full memory, the adaptive policy, and
// every configured baseline at the matched retention ratio. Writes
// results/layers/roles CSVs plus per-run JSON reports under out_dir.
std::vector<ResultRow> run_compress(const ExperimentConfig& cfg);

// Axis is one of delta | demos | budget | k. Writes one results CSV per seed
// plus the merged file; the k axis also writes bound.csv.
std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg, const std::string& axis);

// Merges results CSVs (validating their schema column), writes out_csv and
// returns a plain-text summary table.
std::string run_report(const std::vector<std::string>& inputs, const std::string& out_csv);

nlohmann::json report_to_json(const CompressionReport& report);
nlohmann::json bound_to_json(const BoundEstimate& est);

}  // namespace lapkv
