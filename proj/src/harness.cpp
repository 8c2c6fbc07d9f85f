#include "lapkv/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "lapkv/checkpoint.hpp"

namespace lapkv {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// config file

KvConfig KvConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_string(ss.str());
}

static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

KvConfig KvConfig::from_string(const std::string& text) {
    KvConfig cfg;
    cfg.source_text = text;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        }
        cfg.values[key] = value;
    }
    return cfg;
}

bool KvConfig::has(const std::string& key) const { return values.count(key) > 0; }

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
}

int KvConfig::get_int(const std::string& key, int fallback) const {
    return static_cast<int>(get_int64(key, fallback));
}

int64_t KvConfig::get_int64(const std::string& key, int64_t fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        size_t pos = 0;
        const int64_t v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::invalid_argument("config field " + key + ": expected integer, got '" +
                                    it->second + "'");
    }
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::invalid_argument("config field " + key + ": expected real, got '" +
                                    it->second + "'");
    }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::invalid_argument("config field " + key + ": expected true/false, got '" +
                                it->second + "'");
}

static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<double> KvConfig::get_double_list(const std::string& key,
                                              const std::vector<double>& fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    std::vector<double> out;
    for (const std::string& item : split_list(it->second)) {
        try {
            out.push_back(std::stod(item));
        } catch (...) {
            throw std::invalid_argument("config field " + key + ": bad list element '" + item +
                                        "'");
        }
    }
    if (out.empty()) throw std::invalid_argument("config field " + key + ": empty list");
    return out;
}

std::vector<int> KvConfig::get_int_list(const std::string& key,
                                        const std::vector<int>& fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    std::vector<int> out;
    for (const std::string& item : split_list(it->second)) {
        try {
            out.push_back(std::stoi(item));
        } catch (...) {
            throw std::invalid_argument("config field " + key + ": bad list element '" + item +
                                        "'");
        }
    }
    if (out.empty()) throw std::invalid_argument("config field " + key + ": empty list");
    return out;
}

ExperimentConfig ExperimentConfig::from_config(const KvConfig& cfg) {
    static const std::set<std::string> known = {
        "model.layers",      "model.heads",        "model.d_model",
        "model.max_position", "model.rope_base",   "model.attn_reduce",
        "model.checkpoint",
        "task.kind",         "task.classes",       "task.image_len",
        "task.question_len", "task.answer_len",    "task.alphabet",
        "task.noise",        "task.train_min_demos", "task.train_max_demos",
        "train.steps",       "train.batch",        "train.lr",
        "train.momentum",    "train.log_every",
        "data.train_sequences", "data.demos",      "data.eval",
        "policy.delta",      "policy.ratios",      "policy.group_size",
        "policy.window",     "policy.retain_all_answers", "policy.js_aggregate",
        "policy.refresh_scores", "policy.renumber_positions",
        "chunk.budget",
        "baselines.kinds",   "baselines.sink",     "baselines.pyramid_slope",
        "sweep.delta",       "sweep.demos",        "sweep.budget", "sweep.k",
        "seeds",             "out.dir",            "out.save_memory",
    };
    for (const auto& [key, value] : cfg.values) {
        if (!known.count(key)) {
            throw std::invalid_argument("config field " + key + ": unknown key");
        }
    }

    ExperimentConfig out;
    out.config_text = cfg.source_text;

    out.task.kind = task_kind_from_name(cfg.get_string("task.kind", "classification"));
    out.task.num_classes = cfg.get_int("task.classes", out.task.num_classes);
    out.task.image_len = cfg.get_int("task.image_len", out.task.image_len);
    out.task.question_len = cfg.get_int("task.question_len", out.task.question_len);
    out.task.answer_len = cfg.get_int("task.answer_len", out.task.answer_len);
    out.task.image_alphabet = cfg.get_int("task.alphabet", out.task.image_alphabet);
    out.task.noise = cfg.get_double("task.noise", out.task.noise);
    out.task.train_min_demos = cfg.get_int("task.train_min_demos", out.task.train_min_demos);
    out.task.train_max_demos = cfg.get_int("task.train_max_demos", out.task.train_max_demos);
    out.task.validate();

    out.model.num_layers = cfg.get_int("model.layers", out.model.num_layers);
    out.model.num_heads = cfg.get_int("model.heads", out.model.num_heads);
    out.model.d_model = cfg.get_int("model.d_model", out.model.d_model);
    out.model.max_position = cfg.get_int("model.max_position", out.model.max_position);
    out.model.rope_base = cfg.get_double("model.rope_base", out.model.rope_base);
    const std::string reduce = cfg.get_string("model.attn_reduce", "mean");
    if (reduce != "mean" && reduce != "sum") {
        throw std::invalid_argument("config field model.attn_reduce: expected mean or sum");
    }
    out.model.attn_reduce = reduce == "sum" ? AttnReduce::Sum : AttnReduce::Mean;
    out.model.vocab_size = out.task.vocab().vocab_size;
    out.model.validate();
    out.model_path = cfg.get_string("model.checkpoint", "");

    out.trainer.steps = cfg.get_int("train.steps", out.trainer.steps);
    out.trainer.batch_size = cfg.get_int("train.batch", out.trainer.batch_size);
    out.trainer.learning_rate = cfg.get_double("train.lr", out.trainer.learning_rate);
    out.trainer.momentum = cfg.get_double("train.momentum", out.trainer.momentum);
    out.trainer.log_every = cfg.get_int("train.log_every", 0);
    out.trainer.target_lo = out.task.vocab().label_begin;
    out.trainer.target_hi = out.task.vocab().label_begin + out.task.vocab().label_count;

    out.n_train_sequences = cfg.get_int("data.train_sequences", out.n_train_sequences);
    out.n_demos = cfg.get_int("data.demos", out.n_demos);
    out.n_eval = cfg.get_int("data.eval", out.n_eval);
    if (out.n_eval < 1) throw std::invalid_argument("config field data.eval: must be >= 1");

    out.policy.delta = cfg.get_double("policy.delta", out.policy.delta);
    out.policy.ratios = cfg.get_double_list("policy.ratios", out.policy.ratios);
    out.policy.group_size = cfg.get_int("policy.group_size", out.policy.group_size);
    out.policy.window =
        observation_window_from_name(cfg.get_string("policy.window", "answer"));
    out.policy.retain_all_answers =
        cfg.get_bool("policy.retain_all_answers", out.policy.retain_all_answers);
    const std::string agg = cfg.get_string("policy.js_aggregate", "mean");
    if (agg != "mean" && agg != "max") {
        throw std::invalid_argument("config field policy.js_aggregate: expected mean or max");
    }
    out.policy.js_aggregate = agg == "max" ? JsAggregate::Max : JsAggregate::Mean;
    out.policy.refresh_scores = cfg.get_bool("policy.refresh_scores", false);
    out.policy.renumber_positions = cfg.get_bool("policy.renumber_positions", false);
    out.policy.validate();

    out.chunk_budget = cfg.get_int64("chunk.budget", out.chunk_budget);
    if (out.chunk_budget < out.task.demo_len()) {
        throw std::invalid_argument("config field chunk.budget: smaller than one demonstration");
    }

    if (cfg.has("baselines.kinds")) {
        out.baselines = split_list(cfg.get_string("baselines.kinds", ""));
        for (const std::string& b : out.baselines) baseline_kind_from_name(b);
    }
    out.sink = cfg.get_int("baselines.sink", out.sink);
    out.pyramid_slope = cfg.get_double("baselines.pyramid_slope", out.pyramid_slope);

    out.delta_axis = cfg.get_double_list("sweep.delta", out.delta_axis);
    out.demo_axis = cfg.get_int_list("sweep.demos", out.demo_axis);
    out.budget_axis = cfg.get_int_list("sweep.budget", out.budget_axis);
    out.k_axis = cfg.get_int_list("sweep.k", out.k_axis);

    out.seeds = cfg.get_int_list("seeds", out.seeds);
    if (out.seeds.empty()) throw std::invalid_argument("config field seeds: must list >= 1 seed");
    out.out_dir = cfg.get_string("out.dir", out.out_dir);
    out.save_memory = cfg.get_bool("out.save_memory", out.save_memory);

    if (const char* env = std::getenv("LAPKV_THREADS")) {
        out.threads = std::max(1, std::atoi(env));
    }
    out.trainer.threads = out.threads;
    return out;
}

// ---------------------------------------------------------------------------
// CSV plumbing

std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

namespace {

constexpr const char* kResultsHeader =
    "schema,method,seed,delta,n_demos,chunk_budget,ratio,context_before,context_after,"
    "accuracy,mean_js";
constexpr const char* kLayersHeader =
    "schema,method,seed,delta,chunk,layer,chunk_len,chosen_ratio,retained";
constexpr const char* kRolesHeader = "schema,method,seed,delta,role,kept,removed";
constexpr const char* kBoundHeader =
    "schema,seed,k,delta,delta_hat,global_distance,epsilon_hat,epsilon_distance,gamma,"
    "bound_rhs";

std::string result_line(const ResultRow& r) {
    std::string s = kResultsSchema;
    s += "," + r.method;
    s += "," + std::to_string(r.seed);
    s += "," + fmt_g9(r.delta);
    s += "," + std::to_string(r.n_demos);
    s += "," + std::to_string(r.chunk_budget);
    s += "," + fmt_g9(r.ratio);
    s += "," + std::to_string(r.context_before);
    s += "," + fmt_g9(r.context_after);
    s += "," + fmt_g9(r.accuracy);
    s += "," + fmt_g9(r.mean_js);
    return s;
}

std::string bound_line(const BoundRow& r) {
    std::string s = kBoundSchema;
    s += "," + std::to_string(r.seed);
    s += "," + std::to_string(r.k);
    s += "," + fmt_g9(r.delta);
    s += "," + fmt_g9(r.delta_hat);
    s += "," + fmt_g9(r.global_distance);
    s += "," + fmt_g9(r.epsilon_hat);
    s += "," + fmt_g9(r.epsilon_distance);
    s += "," + fmt_g9(r.gamma);
    s += "," + fmt_g9(r.bound_rhs);
    return s;
}

void write_lines(const std::string& path, const std::string& header,
                 const std::vector<std::string>& lines) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << header << "\n";
    for (const std::string& l : lines) out << l << "\n";
}

void layer_lines(std::vector<std::string>& out, const std::string& method, int seed,
                 double delta, const CompressionReport& report) {
    for (size_t c = 0; c < report.chunks.size(); ++c) {
        for (const LayerPruneRecord& rec : report.chunks[c].layers) {
            std::string s = kLayersSchema;
            s += "," + method;
            s += "," + std::to_string(seed);
            s += "," + fmt_g9(delta);
            s += "," + std::to_string(c);
            s += "," + std::to_string(rec.layer);
            s += "," + std::to_string(rec.chunk_len);
            s += "," + fmt_g9(rec.chosen_ratio);
            s += "," + std::to_string(rec.retained);
            out.push_back(std::move(s));
        }
    }
}

void role_lines(std::vector<std::string>& out, const std::string& method, int seed,
                double delta, const CompressionReport& report) {
    for (int r = 0; r < 4; ++r) {
        std::string s = kRolesSchema;
        s += "," + method;
        s += "," + std::to_string(seed);
        s += "," + fmt_g9(delta);
        s += std::string(",") + role_name(static_cast<TokenRole>(r));
        s += "," + std::to_string(report.kept.totals[r]);
        s += "," + std::to_string(report.removed.totals[r]);
        out.push_back(std::move(s));
    }
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

nlohmann::json report_to_json(const CompressionReport& report) {
    nlohmann::json j;
    j["context_tokens"] = report.context_tokens;
    j["entries_before"] = report.entries_before;
    j["entries_after"] = report.entries_after;
    j["ratio"] = report.ratio;
    j["mean_kept_per_layer"] = report.mean_kept_per_layer;
    j["wall_ms"] = report.wall_ms;
    auto census = [](const RoleCensus& c) {
        nlohmann::json out;
        for (int r = 0; r < 4; ++r) out[role_name(static_cast<TokenRole>(r))] = c.totals[r];
        return out;
    };
    j["kept"] = census(report.kept);
    j["removed"] = census(report.removed);
    j["chunks"] = nlohmann::json::array();
    for (const PruneReport& chunk : report.chunks) {
        nlohmann::json cj;
        cj["chunk_len"] = chunk.chunk_len;
        cj["entries_before"] = chunk.entries_before;
        cj["entries_after"] = chunk.entries_after;
        cj["layers"] = nlohmann::json::array();
        for (const LayerPruneRecord& rec : chunk.layers) {
            cj["layers"].push_back({{"layer", rec.layer},
                                    {"chosen_ratio", rec.chosen_ratio},
                                    {"retained", rec.retained},
                                    {"chunk_len", rec.chunk_len},
                                    {"attempted_ratios", rec.attempted_ratios},
                                    {"attempted_js", rec.attempted_js}});
        }
        j["chunks"].push_back(std::move(cj));
    }
    return j;
}

nlohmann::json bound_to_json(const BoundEstimate& est) {
    return {{"delta_hat", est.delta_hat},
            {"global_distance", est.global_distance},
            {"epsilon_hat", est.epsilon_hat},
            {"epsilon_distance", est.epsilon_distance},
            {"chunk_count", est.chunk_count},
            {"delta", est.delta},
            {"gamma", est.gamma},
            {"bound_rhs", est.bound_rhs}};
}

// ---------------------------------------------------------------------------
// runs

ToyTransformer obtain_model(const ExperimentConfig& cfg, const TaskData& data, int seed) {
    if (!cfg.model_path.empty()) {
        return load_model(cfg.model_path);
    }
    Rng chain(static_cast<uint64_t>(seed));
    const uint64_t init_seed = chain.next_seed();
    const uint64_t train_seed = chain.next_seed();
    ToyTransformer model = ToyTransformer::random_init(cfg.model, init_seed);
    TrainConfig tc = cfg.trainer;
    tc.seed = train_seed;
    train(model, data.train_sequences, tc);
    return model;
}

namespace {

// system prefix only: the zero-demonstration memory
KvMemory prefix_memory(const ToyTransformer& model, const PromptLayout& layout) {
    AssembledContext ctx = assemble_context({}, layout, /*include_system=*/true);
    TokenBlock block{ctx.tokens, ctx.roles, 0, 0};
    return extract_kv(model, KvMemory::empty(model.config.num_layers, model.config.d_model),
                      block);
}

struct SeedContext {
    TaskData data;
    ToyTransformer model;
    PromptLayout layout;
};

SeedContext seed_context(const ExperimentConfig& cfg, int seed, int n_demos) {
    TaskSpec task = cfg.task;
    task.seed = static_cast<uint64_t>(seed);
    SeedContext ctx{generate(task, cfg.n_train_sequences, n_demos, cfg.n_eval), {}, {}};
    ctx.model = obtain_model(cfg, ctx.data, seed);
    ctx.layout = task.prompt_layout();
    return ctx;
}

void write_seed_and_merged(const fs::path& dir, const std::string& stem,
                           const std::string& header,
                           const std::map<int, std::vector<std::string>>& per_seed) {
    std::vector<std::string> merged;
    for (const auto& [seed, lines] : per_seed) {
        write_lines((dir / (stem + "_seed" + std::to_string(seed) + ".csv")).string(), header,
                    lines);
        merged.insert(merged.end(), lines.begin(), lines.end());
    }
    write_lines((dir / (stem + ".csv")).string(), header, merged);
}

}  // namespace

std::vector<ResultRow> run_compress(const ExperimentConfig& cfg) {
    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir / "reports");
    {
        std::ofstream cfgcopy(dir / "config.cfg");
        cfgcopy << cfg.config_text;
    }

    std::vector<ResultRow> rows;
    std::vector<std::string> result_csv, layer_csv, role_csv;

    for (int seed : cfg.seeds) {
        SeedContext ctx = seed_context(cfg, seed, cfg.n_demos);
        const ChunkPlan plan = plan_chunks(ctx.data.demos, cfg.chunk_budget);
        const int64_t context_len = context_token_count(ctx.data.demos, ctx.layout);
        const KvMemory full = extract_full(ctx.model, ctx.data.demos, plan, ctx.layout);
        const double acc_full = evaluate_accuracy(ctx.model, full, ctx.data.eval, ctx.layout,
                                                  context_len, cfg.threads);

        ResultRow full_row;
        full_row.method = "full";
        full_row.seed = seed;
        full_row.delta = cfg.policy.delta;
        full_row.n_demos = cfg.n_demos;
        full_row.chunk_budget = cfg.chunk_budget;
        full_row.ratio = 1.0;
        full_row.context_before = context_len;
        full_row.context_after = static_cast<double>(context_len);
        full_row.accuracy = acc_full;
        full_row.mean_js = 0.0;
        rows.push_back(full_row);
        result_csv.push_back(result_line(full_row));

        auto [lap_mem, lap_report] =
            compress(ctx.model, ctx.data.demos, cfg.policy, plan, ctx.layout);
        ResultRow lap_row;
        lap_row.method = "lap";
        lap_row.seed = seed;
        lap_row.delta = cfg.policy.delta;
        lap_row.n_demos = cfg.n_demos;
        lap_row.chunk_budget = cfg.chunk_budget;
        lap_row.ratio = lap_report.ratio;
        lap_row.context_before = context_len;
        lap_row.context_after = lap_report.mean_kept_per_layer;
        lap_row.accuracy = evaluate_accuracy(ctx.model, lap_mem, ctx.data.eval, ctx.layout,
                                             context_len, cfg.threads);
        lap_row.mean_js = mean_of(answer_js_per_query(ctx.model, full, lap_mem, ctx.data.eval,
                                                      ctx.layout, context_len));
        rows.push_back(lap_row);
        result_csv.push_back(result_line(lap_row));
        layer_lines(layer_csv, "lap", seed, cfg.policy.delta, lap_report);
        role_lines(role_csv, "lap", seed, cfg.policy.delta, lap_report);
        if (cfg.save_memory) {
            save_memory((dir / ("memory_lap_seed" + std::to_string(seed) + ".ckpt")).string(),
                        lap_mem);
        }
        {
            std::ofstream js(dir / "reports" / ("lap_seed" + std::to_string(seed) + ".json"));
            js << report_to_json(lap_report).dump(2) << "\n";
        }

        // baselines run at the ratio the adaptive pass actually achieved
        const int min_chunk = [&] {
            int64_t mn = cfg.chunk_budget;
            for (auto [b, e] : plan.ranges) {
                int64_t len = 0;
                for (int i = b; i < e; ++i) {
                    len += static_cast<int64_t>(ctx.data.demos[i].token_count());
                }
                mn = std::min(mn, len);
            }
            return static_cast<int>(mn);
        }();
        const double rho =
            std::max(lap_report.ratio, 1.5 / static_cast<double>(std::max(min_chunk, 2)));

        for (const std::string& name : cfg.baselines) {
            BaselineSpec spec;
            spec.kind = baseline_kind_from_name(name);
            spec.rho = rho;
            spec.pyramid_slope = cfg.pyramid_slope;
            spec.sink = cfg.sink;
            auto [mem, report] = baseline_compress(ctx.model, ctx.data.demos, spec, plan,
                                                   ctx.layout);
            ResultRow row;
            row.method = name;
            row.seed = seed;
            row.delta = cfg.policy.delta;
            row.n_demos = cfg.n_demos;
            row.chunk_budget = cfg.chunk_budget;
            row.ratio = report.ratio;
            row.context_before = context_len;
            row.context_after = report.mean_kept_per_layer;
            row.accuracy = evaluate_accuracy(ctx.model, mem, ctx.data.eval, ctx.layout,
                                             context_len, cfg.threads);
            row.mean_js = mean_of(answer_js_per_query(ctx.model, full, mem, ctx.data.eval,
                                                      ctx.layout, context_len));
            rows.push_back(row);
            result_csv.push_back(result_line(row));
            layer_lines(layer_csv, name, seed, cfg.policy.delta, report);
            role_lines(role_csv, name, seed, cfg.policy.delta, report);
            std::ofstream js(dir / "reports" /
                             (name + "_seed" + std::to_string(seed) + ".json"));
            js << report_to_json(report).dump(2) << "\n";
        }
    }

    write_lines((dir / "results.csv").string(), kResultsHeader, result_csv);
    write_lines((dir / "layers.csv").string(), kLayersHeader, layer_csv);
    write_lines((dir / "roles.csv").string(), kRolesHeader, role_csv);
    return rows;
}

std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg, const std::string& axis) {
    if (axis != "delta" && axis != "demos" && axis != "budget" && axis != "k") {
        throw std::invalid_argument("run_sweep: unknown axis '" + axis +
                                    "' (expected delta|demos|budget|k)");
    }
    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    {
        std::ofstream cfgcopy(dir / "config.cfg");
        cfgcopy << cfg.config_text;
    }

    std::vector<ResultRow> rows;
    std::map<int, std::vector<std::string>> per_seed_results;
    std::vector<std::string> layer_csv, role_csv, bound_csv;

    const int max_demos = axis == "demos"
                              ? std::max(cfg.n_demos,
                                         *std::max_element(cfg.demo_axis.begin(),
                                                           cfg.demo_axis.end()))
                              : cfg.n_demos;

    for (int seed : cfg.seeds) {
        SeedContext ctx = seed_context(cfg, seed, max_demos);
        auto& seed_lines = per_seed_results[seed];

        auto push_row = [&](const ResultRow& row) {
            rows.push_back(row);
            seed_lines.push_back(result_line(row));
        };

        auto lap_cell = [&](const std::vector<Demonstration>& demos,
                            const RetentionPolicy& policy, const ChunkPlan& plan,
                            int n_demos, int64_t budget_marker,
                            const KvMemory& full) -> std::pair<KvMemory, CompressionReport> {
            auto [mem, report] = compress(ctx.model, demos, policy, plan, ctx.layout);
            const int64_t context_len = context_token_count(demos, ctx.layout);
            ResultRow row;
            row.method = "lap";
            row.seed = seed;
            row.delta = policy.delta;
            row.n_demos = n_demos;
            row.chunk_budget = budget_marker;
            row.ratio = report.ratio;
            row.context_before = context_len;
            row.context_after = report.mean_kept_per_layer;
            row.accuracy = evaluate_accuracy(ctx.model, mem, ctx.data.eval, ctx.layout,
                                             context_len, cfg.threads);
            row.mean_js = mean_of(answer_js_per_query(ctx.model, full, mem, ctx.data.eval,
                                                      ctx.layout, context_len));
            push_row(row);
            layer_lines(layer_csv, "lap", seed, policy.delta, report);
            role_lines(role_csv, "lap", seed, policy.delta, report);
            return {std::move(mem), std::move(report)};
        };

        if (axis == "delta") {
            const ChunkPlan plan = plan_chunks(ctx.data.demos, cfg.chunk_budget);
            const KvMemory full = extract_full(ctx.model, ctx.data.demos, plan, ctx.layout);
            for (double delta : cfg.delta_axis) {
                RetentionPolicy policy = cfg.policy;
                policy.delta = delta;
                lap_cell(ctx.data.demos, policy, plan, max_demos, cfg.chunk_budget, full);
            }
        } else if (axis == "demos") {
            for (int n : cfg.demo_axis) {
                const std::vector<Demonstration> demos(ctx.data.demos.begin(),
                                                       ctx.data.demos.begin() + n);
                const int64_t context_len = context_token_count(demos, ctx.layout);
                KvMemory full;
                if (n == 0) {
                    full = prefix_memory(ctx.model, ctx.layout);
                } else {
                    const ChunkPlan plan = plan_chunks(demos, cfg.chunk_budget);
                    full = extract_full(ctx.model, demos, plan, ctx.layout);
                }
                ResultRow row;
                row.method = "full";
                row.seed = seed;
                row.delta = cfg.policy.delta;
                row.n_demos = n;
                row.chunk_budget = cfg.chunk_budget;
                row.ratio = 1.0;
                row.context_before = context_len;
                row.context_after = static_cast<double>(context_len);
                row.accuracy = evaluate_accuracy(ctx.model, full, ctx.data.eval, ctx.layout,
                                                 context_len, cfg.threads);
                row.mean_js = 0.0;
                push_row(row);
                if (n > 0) {
                    const ChunkPlan plan = plan_chunks(demos, cfg.chunk_budget);
                    lap_cell(demos, cfg.policy, plan, n, cfg.chunk_budget, full);
                }
            }
        } else if (axis == "budget") {
            for (int budget : cfg.budget_axis) {
                const ChunkPlan plan = plan_chunks(ctx.data.demos, budget);
                const KvMemory full = extract_full(ctx.model, ctx.data.demos, plan, ctx.layout);
                lap_cell(ctx.data.demos, cfg.policy, plan, max_demos, budget, full);
            }
        } else {  // k
            for (int k : cfg.k_axis) {
                const ChunkPlan plan = plan_chunk_count(ctx.data.demos, k);
                const KvMemory full = extract_full(ctx.model, ctx.data.demos, plan, ctx.layout);
                auto [mem, report] =
                    lap_cell(ctx.data.demos, cfg.policy, plan, max_demos, plan.budget_tokens,
                             full);
                const BoundEstimate est =
                    measure_bound_on(ctx.model, ctx.data.demos, ctx.data.eval, cfg.policy, plan,
                                     ctx.layout, mem);
                BoundRow brow;
                brow.seed = seed;
                brow.k = k;
                brow.delta = cfg.policy.delta;
                brow.delta_hat = est.delta_hat;
                brow.global_distance = est.global_distance;
                brow.epsilon_hat = est.epsilon_hat;
                brow.epsilon_distance = est.epsilon_distance;
                brow.gamma = est.gamma;
                brow.bound_rhs = est.bound_rhs;
                bound_csv.push_back(bound_line(brow));
            }
        }
    }

    write_seed_and_merged(dir, "results", kResultsHeader, per_seed_results);
    write_lines((dir / "layers.csv").string(), kLayersHeader, layer_csv);
    write_lines((dir / "roles.csv").string(), kRolesHeader, role_csv);
    if (axis == "k") write_lines((dir / "bound.csv").string(), kBoundHeader, bound_csv);
    return rows;
}

std::string run_report(const std::vector<std::string>& inputs, const std::string& out_csv) {
    if (inputs.empty()) throw std::invalid_argument("report: no input files");
    std::vector<std::string> merged;
    struct Agg {
        int n = 0;
        double ratio = 0.0, acc = 0.0, js = 0.0;
    };
    std::map<std::string, Agg> by_method;

    for (const std::string& path : inputs) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("report: cannot open " + path);
        std::string line;
        if (!std::getline(in, line)) throw std::runtime_error("report: empty file " + path);
        if (line != kResultsHeader) {
            throw std::runtime_error("report: unrecognized results header in " + path);
        }
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> fields = split_list(line);
            if (fields.size() != 11 || fields[0] != kResultsSchema) {
                throw std::runtime_error("report: schema mismatch in " + path + " (expected " +
                                         std::string(kResultsSchema) + ")");
            }
            merged.push_back(line);
            Agg& a = by_method[fields[1]];
            a.n += 1;
            a.ratio += std::stod(fields[6]);
            a.acc += std::stod(fields[9]);
            a.js += std::stod(fields[10]);
        }
    }
    if (!out_csv.empty()) write_lines(out_csv, kResultsHeader, merged);

    std::string table = "method           rows  ratio      accuracy   mean_js\n";
    for (const auto& [method, a] : by_method) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-16s %-5d %-10.4f %-10.4f %-10.6f\n", method.c_str(),
                      a.n, a.ratio / a.n, a.acc / a.n, a.js / a.n);
        table += buf;
    }
    return table;
}

}  // namespace lapkv
