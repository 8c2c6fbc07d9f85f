#pragma once

#include <cstdint>
#include <vector>

#include "lapkv/kvmem.hpp"

namespace lapkv {

// One formatted in-context example: an image-surrogate token block, a
// question block and an answer block. Delimiter tokens are prepended to each
// block at assembly time.
struct Demonstration {
    std::vector<int> image;
    std::vector<int> question;
    std::vector<int> answer;

    size_t token_count() const { return image.size() + question.size() + answer.size() + 3; }
};

struct SpanRange {
    int begin = 0;
    int end = 0;  // half-open

    int length() const { return end - begin; }
};

// Index ranges of the three blocks inside one assembled demo; each span
// includes the block's leading delimiter token.
struct DemoSpans {
    SpanRange image, question, answer;
};

struct PromptLayout {
    std::vector<int> system_tokens;
    int image_delim = 0;
    int question_delim = 0;
    int answer_delim = 0;
};

struct AssembledContext {
    std::vector<int> tokens;
    std::vector<TokenRole> roles;
    std::vector<DemoSpans> spans;  // offsets into tokens
};

// Concatenates demos into one role-tagged sequence. The system prefix appears
// only when include_system is set (the first chunk of a context).
AssembledContext assemble_context(const std::vector<Demonstration>& demos,
                                  const PromptLayout& layout, bool include_system);

// Chunk input for compression: the concatenated chunk plus the individual
// demo rows, which are forwarded as a batch during pruning.
struct ChunkInput {
    std::vector<int> tokens;
    std::vector<TokenRole> roles;
    int64_t start_position = 0;
    int chunk_index = 0;
    std::vector<std::vector<int>> demo_rows;
    std::vector<DemoSpans> row_spans;  // offsets into each row
};

ChunkInput make_chunk_input(const std::vector<Demonstration>& demos,
                            const PromptLayout& layout, int chunk_index,
                            int64_t start_position);

}  // namespace lapkv
