#include "lapkv/prompt.hpp"

#include <stdexcept>

namespace lapkv {

namespace {

void append_block(std::vector<int>& tokens, std::vector<TokenRole>& roles, int delim,
                  const std::vector<int>& block, TokenRole role, SpanRange& span) {
    span.begin = static_cast<int>(tokens.size());
    tokens.push_back(delim);
    roles.push_back(role);
    tokens.insert(tokens.end(), block.begin(), block.end());
    roles.insert(roles.end(), block.size(), role);
    span.end = static_cast<int>(tokens.size());
}

}  // namespace

AssembledContext assemble_context(const std::vector<Demonstration>& demos,
                                  const PromptLayout& layout, bool include_system) {
    AssembledContext out;
    if (include_system) {
        out.tokens = layout.system_tokens;
        out.roles.assign(layout.system_tokens.size(), TokenRole::System);
    }
    out.spans.reserve(demos.size());
    for (const Demonstration& d : demos) {
        if (d.answer.empty()) throw std::invalid_argument("assemble_context: empty answer block");
        DemoSpans spans;
        append_block(out.tokens, out.roles, layout.image_delim, d.image, TokenRole::Image,
                     spans.image);
        append_block(out.tokens, out.roles, layout.question_delim, d.question,
                     TokenRole::Question, spans.question);
        append_block(out.tokens, out.roles, layout.answer_delim, d.answer, TokenRole::Answer,
                     spans.answer);
        out.spans.push_back(spans);
    }
    return out;
}

ChunkInput make_chunk_input(const std::vector<Demonstration>& demos,
                            const PromptLayout& layout, int chunk_index,
                            int64_t start_position) {
    AssembledContext ctx = assemble_context(demos, layout, /*include_system=*/chunk_index == 0);
    ChunkInput chunk;
    chunk.tokens = std::move(ctx.tokens);
    chunk.roles = std::move(ctx.roles);
    chunk.start_position = start_position;
    chunk.chunk_index = chunk_index;
    chunk.demo_rows.reserve(demos.size());
    for (const Demonstration& d : demos) {
        AssembledContext row = assemble_context({d}, layout, /*include_system=*/false);
        chunk.demo_rows.push_back(std::move(row.tokens));
        chunk.row_spans.push_back(row.spans.front());
    }
    return chunk;
}

}  // namespace lapkv
