#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lapkv/prompt.hpp"

namespace lapkv {

enum class TaskKind { SyntheticClassification, AssociativeRecall };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

// Token-id regions of the synthetic vocabulary. Role blocks draw from
// disjoint regions; answers come from the dedicated label region and recall
// keys from a dedicated key region so content matches are unambiguous.
struct VocabLayout {
    int system_begin = 0;
    int system_count = 2;
    int delim_image = 0;
    int delim_question = 0;
    int delim_answer = 0;
    int image_begin = 0;
    int image_count = 0;
    int key_begin = 0;
    int key_count = 0;  // recall only
    int question_begin = 0;
    int question_count = 0;
    int label_begin = 0;
    int label_count = 0;  // classes/values plus one terminator id
    int vocab_size = 0;

    int terminator() const { return label_begin + label_count - 1; }
};

struct TaskSpec {
    TaskKind kind = TaskKind::SyntheticClassification;
    int num_classes = 4;  // class count, or key-space size for recall
    int image_len = 16;
    int question_len = 4;
    int answer_len = 2;
    int image_alphabet = 24;
    double noise = 0.05;
    uint64_t seed = 1;
    // demos per generated training sequence (inclusive range)
    int train_min_demos = 2;
    int train_max_demos = 6;

    VocabLayout vocab() const;
    PromptLayout prompt_layout() const;
    int demo_len() const { return image_len + question_len + answer_len + 3; }
    void validate() const;
};

struct TaskData {
    std::vector<std::vector<int>> train_sequences;  // ready for LM training
    std::vector<Demonstration> demos;
    std::vector<Demonstration> eval;
};

// Draws the demo and eval splits from one seeded task instance and builds
// n_train independently re-randomized training sequences of the same format.
// Eval queries are answerable from the demo split by construction.
TaskData generate(const TaskSpec& spec, int n_train, int n_demo, int n_eval);

// Line-delimited record format: one JSON object per line with the three
// token-id arrays of a demonstration.
void save_demos(const std::string& path, const std::vector<Demonstration>& demos);
std::vector<Demonstration> load_demos(const std::string& path);

}  // namespace lapkv
