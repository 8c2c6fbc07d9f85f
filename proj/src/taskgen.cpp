#include "lapkv/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace lapkv {

const char* task_kind_name(TaskKind k) {
    return k == TaskKind::SyntheticClassification ? "classification" : "recall";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "classification") return TaskKind::SyntheticClassification;
    if (name == "recall") return TaskKind::AssociativeRecall;
    throw std::invalid_argument("unknown task kind: " + name);
}

VocabLayout TaskSpec::vocab() const {
    VocabLayout v;
    v.system_begin = 0;
    v.system_count = 2;
    v.delim_image = v.system_begin + v.system_count;
    v.delim_question = v.delim_image + 1;
    v.delim_answer = v.delim_question + 1;
    v.image_begin = v.delim_answer + 1;
    v.image_count = image_alphabet;
    v.key_begin = v.image_begin + v.image_count;
    v.key_count = kind == TaskKind::AssociativeRecall ? num_classes : 0;
    v.question_begin = v.key_begin + v.key_count;
    v.question_count = question_len;
    v.label_begin = v.question_begin + v.question_count;
    v.label_count = num_classes + 1;
    v.vocab_size = v.label_begin + v.label_count;
    return v;
}

PromptLayout TaskSpec::prompt_layout() const {
    const VocabLayout v = vocab();
    PromptLayout p;
    p.system_tokens.resize(v.system_count);
    std::iota(p.system_tokens.begin(), p.system_tokens.end(), v.system_begin);
    p.image_delim = v.delim_image;
    p.question_delim = v.delim_question;
    p.answer_delim = v.delim_answer;
    return p;
}

void TaskSpec::validate() const {
    if (num_classes < 2) throw std::invalid_argument("TaskSpec: num_classes must be >= 2");
    if (image_len < 2) throw std::invalid_argument("TaskSpec: image_len must be >= 2");
    if (question_len < 1) throw std::invalid_argument("TaskSpec: question_len must be >= 1");
    if (answer_len < 1 || answer_len > 2) {
        throw std::invalid_argument("TaskSpec: answer_len must be 1 or 2");
    }
    if (image_alphabet < 2) throw std::invalid_argument("TaskSpec: image_alphabet must be >= 2");
    if (noise < 0.0 || noise >= 1.0) throw std::invalid_argument("TaskSpec: noise must be in [0, 1)");
    if (train_min_demos < 1 || train_max_demos < train_min_demos) {
        throw std::invalid_argument("TaskSpec: bad training demo range");
    }
}

namespace {

std::vector<int> random_image_tokens(const VocabLayout& v, int len, Rng& rng) {
    std::vector<int> out(len);
    for (int& t : out) t = v.image_begin + rng.uniform_int(0, v.image_count - 1);
    return out;
}

std::vector<int> noisy_copy(const std::vector<int>& pattern, const VocabLayout& v, double noise,
                            Rng& rng) {
    std::vector<int> out = pattern;
    for (int& t : out) {
        if (noise > 0.0 && rng.uniform() < noise) {
            t = v.image_begin + rng.uniform_int(0, v.image_count - 1);
        }
    }
    return out;
}

std::vector<int> question_block(const TaskSpec& spec, const VocabLayout& v, int key_token) {
    // Fixed interrogative block; recall places the queried key last, right
    // before the answer delimiter, where it can drive the retrieval.
    std::vector<int> q(spec.question_len);
    std::iota(q.begin(), q.end(), v.question_begin);
    if (key_token >= 0) q.back() = key_token;
    return q;
}

std::vector<int> answer_block(const TaskSpec& spec, const VocabLayout& v, int value_token) {
    std::vector<int> a{value_token};
    if (spec.answer_len == 2) a.push_back(v.terminator());
    return a;
}

// Latents of one task instance: per-class image patterns for classification,
// or a key->value map for recall.
struct TaskLatents {
    std::vector<std::vector<int>> patterns;  // classification
    std::vector<int> keys, values;           // recall
};

TaskLatents draw_latents(const TaskSpec& spec, const VocabLayout& v, Rng& rng) {
    TaskLatents lat;
    if (spec.kind == TaskKind::SyntheticClassification) {
        lat.patterns.resize(spec.num_classes);
        if (spec.num_classes * spec.image_len <= v.image_count) {
            // token-disjoint patterns when the alphabet allows it: every
            // pattern token then identifies its class unambiguously
            std::vector<int> alphabet(v.image_count);
            std::iota(alphabet.begin(), alphabet.end(), v.image_begin);
            std::shuffle(alphabet.begin(), alphabet.end(), rng.gen);
            int next = 0;
            for (int c = 0; c < spec.num_classes; ++c) {
                lat.patterns[c].assign(alphabet.begin() + next,
                                       alphabet.begin() + next + spec.image_len);
                next += spec.image_len;
            }
        } else {
            for (int c = 0; c < spec.num_classes; ++c) {
                for (int attempt = 0; attempt < 100; ++attempt) {
                    lat.patterns[c] = random_image_tokens(v, spec.image_len, rng);
                    bool clash = false;
                    for (int o = 0; o < c; ++o) clash |= (lat.patterns[c] == lat.patterns[o]);
                    if (!clash) break;
                }
            }
        }
    } else {
        std::vector<int> keys(v.key_count);
        std::iota(keys.begin(), keys.end(), v.key_begin);
        std::shuffle(keys.begin(), keys.end(), rng.gen);
        lat.keys = keys;
        std::vector<int> labels(spec.num_classes);
        std::iota(labels.begin(), labels.end(), v.label_begin);
        std::shuffle(labels.begin(), labels.end(), rng.gen);
        lat.values = labels;
    }
    return lat;
}

// A context demonstration for class/key c. Recall images carry the asked-for
// binding plus decoy bindings for other keys, so answering always requires
// matching the question's key against the image content.
Demonstration make_demo(const TaskSpec& spec, const VocabLayout& v, const TaskLatents& lat,
                        int c, Rng& rng) {
    Demonstration d;
    if (spec.kind == TaskKind::SyntheticClassification) {
        d.image = noisy_copy(lat.patterns[c], v, spec.noise, rng);
        d.question = question_block(spec, v, -1);
        d.answer = answer_block(spec, v, v.label_begin + c);
    } else {
        d.image = random_image_tokens(v, spec.image_len, rng);
        const int pairs = std::clamp(spec.image_len / 4, 1, 3);
        // non-overlapping two-token slots at random even offsets
        std::vector<int> slots(spec.image_len / 2);
        std::iota(slots.begin(), slots.end(), 0);
        std::shuffle(slots.begin(), slots.end(), rng.gen);
        std::vector<int> who(pairs);
        who[0] = c;
        for (int p = 1; p < pairs; ++p) {
            int other = rng.uniform_int(0, spec.num_classes - 1);
            while (other == c) other = rng.uniform_int(0, spec.num_classes - 1);
            who[p] = other;
        }
        for (int p = 0; p < pairs; ++p) {
            d.image[2 * slots[p]] = lat.keys[who[p]];
            d.image[2 * slots[p] + 1] = lat.values[who[p]];
        }
        d.question = question_block(spec, v, lat.keys[c]);
        d.answer = answer_block(spec, v, lat.values[c]);
    }
    return d;
}

// An answer-seeking query for class/key c; recall queries carry no embedded
// pair, so the value is only recoverable from context.
Demonstration make_query(const TaskSpec& spec, const VocabLayout& v, const TaskLatents& lat,
                         int c, Rng& rng) {
    if (spec.kind == TaskKind::SyntheticClassification) return make_demo(spec, v, lat, c, rng);
    Demonstration d;
    d.image = random_image_tokens(v, spec.image_len, rng);
    d.question = question_block(spec, v, lat.keys[c]);
    d.answer = answer_block(spec, v, lat.values[c]);
    return d;
}

std::vector<int> training_sequence(const TaskSpec& spec, const VocabLayout& v,
                                   const PromptLayout& layout, Rng& rng) {
    // Fresh latents every sequence: the class/key bindings are only ever
    // available in context, never learnable from the weights. Several queries
    // follow the demonstrations so most of the answer signal requires
    // retrieving bindings from other rows, exactly like the deployed setting.
    // A long-tailed demo count keeps retrieval distances covered well beyond
    // the common range, otherwise accuracy collapses on long contexts.
    const TaskLatents lat = draw_latents(spec, v, rng);
    int m = rng.uniform_int(spec.train_min_demos, spec.train_max_demos);
    const double tail = rng.uniform();
    if (tail > 0.92) {
        m = rng.uniform_int(6 * spec.train_max_demos, 8 * spec.train_max_demos);
    } else if (tail > 0.80) {
        m = rng.uniform_int(spec.train_max_demos + 1, 6 * spec.train_max_demos);
    }
    std::vector<Demonstration> demos;
    std::vector<int> demo_class(m);
    for (int i = 0; i < m; ++i) {
        demo_class[i] = rng.uniform_int(0, spec.num_classes - 1);
        demos.push_back(make_demo(spec, v, lat, demo_class[i], rng));
    }
    const int queries = std::clamp(m, 1, 6);
    for (int q = 0; q < queries; ++q) {
        const int qc = demo_class[rng.uniform_int(0, m - 1)];
        demos.push_back(make_query(spec, v, lat, qc, rng));
    }
    return assemble_context(demos, layout, /*include_system=*/true).tokens;
}

}  // namespace

TaskData generate(const TaskSpec& spec, int n_train, int n_demo, int n_eval) {
    spec.validate();
    const VocabLayout v = spec.vocab();
    const PromptLayout layout = spec.prompt_layout();

    Rng rng(spec.seed);
    Rng train_rng(rng.next_seed());
    Rng demo_rng(rng.next_seed());
    Rng eval_rng(rng.next_seed());

    TaskData data;
    data.train_sequences.reserve(n_train);
    for (int i = 0; i < n_train; ++i) {
        data.train_sequences.push_back(training_sequence(spec, v, layout, train_rng));
    }

    // demo/eval splits share one task instance; demos cover classes evenly
    const TaskLatents lat = draw_latents(spec, v, demo_rng);
    std::vector<int> demo_class(n_demo);
    for (int i = 0; i < n_demo; ++i) demo_class[i] = i % spec.num_classes;
    std::shuffle(demo_class.begin(), demo_class.end(), demo_rng.gen);
    for (int i = 0; i < n_demo; ++i) {
        data.demos.push_back(make_demo(spec, v, lat, demo_class[i], demo_rng));
    }

    for (int i = 0; i < n_eval; ++i) {
        const int c = n_demo > 0 ? demo_class[eval_rng.uniform_int(0, n_demo - 1)]
                                 : eval_rng.uniform_int(0, spec.num_classes - 1);
        Demonstration q = make_query(spec, v, lat, c, eval_rng);
        if (spec.noise > 0.0) {
            // keep eval instances distinct from the demo split
            for (int attempt = 0; attempt < 100; ++attempt) {
                bool clash = false;
                for (const Demonstration& d : data.demos) clash |= (d.image == q.image);
                if (!clash) break;
                q = make_query(spec, v, lat, c, eval_rng);
            }
        }
        data.eval.push_back(std::move(q));
    }
    return data;
}

void save_demos(const std::string& path, const std::vector<Demonstration>& demos) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const Demonstration& d : demos) {
        nlohmann::json j;
        j["image"] = d.image;
        j["question"] = d.question;
        j["answer"] = d.answer;
        out << j.dump() << "\n";
    }
}

std::vector<Demonstration> load_demos(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<Demonstration> demos;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Demonstration d;
        d.image = j.at("image").get<std::vector<int>>();
        d.question = j.at("question").get<std::vector<int>>();
        d.answer = j.at("answer").get<std::vector<int>>();
        demos.push_back(std::move(d));
    }
    return demos;
}

}  // namespace lapkv
