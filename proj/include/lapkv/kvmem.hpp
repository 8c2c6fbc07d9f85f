#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lapkv/tensor.hpp"

namespace lapkv {

struct ToyTransformer;

enum class TokenRole : int { System = 0, Image = 1, Question = 2, Answer = 3 };

const char* role_name(TokenRole r);

// One attention layer's slice of the memory. Keys carry rotary encoding for
// their original absolute position, applied at write time; pruning never
// renumbers positions.
struct KvLayer {
    Matrix keys;    // [count, d_model]
    Matrix values;  // [count, d_model]
    std::vector<int64_t> positions;
    std::vector<TokenRole> roles;
    std::vector<int> source_chunk;

    int count() const { return keys.rows; }
};

// Ragged per-layer key/value store. Layers may have different lengths after
// pruning. A KvMemory is single-owner; read-only sharing is safe.
struct KvMemory {
    std::vector<KvLayer> layers;

    static KvMemory empty(int num_layers, int d_model);

    int num_layers() const { return static_cast<int>(layers.size()); }
    int64_t max_position() const;  // -1 when empty
    size_t total_entries() const;
    bool is_empty() const { return total_entries() == 0; }

    // positions strictly increasing within each layer, consistent widths
    void validate() const;
};

// Layer-wise concatenation; b's entries must come strictly after a's per layer.
KvMemory concat(const KvMemory& a, const KvMemory& b);

struct LayerSelection {
    int layer = 0;
    std::vector<int> kept;  // sorted ascending, unique, nonempty
};

// Returns memory with only the selected entries at selection.layer; all other
// layers untouched. Survivor order and metadata are preserved.
KvMemory prune_layer(const KvMemory& memory, const LayerSelection& selection);

// Gather a subset of one layer in place (same contract as prune_layer but
// avoids copying the untouched layers).
void prune_layer_inplace(KvMemory& memory, const LayerSelection& selection);

struct RoleCensus {
    // counts[layer][role]
    std::vector<std::array<int64_t, 4>> per_layer;
    std::array<int64_t, 4> totals{};

    int64_t total() const { return totals[0] + totals[1] + totals[2] + totals[3]; }
};

RoleCensus role_census(const KvMemory& memory);
// Per-role counts removed going from pre to post (post must be a subset).
RoleCensus census_diff(const RoleCensus& pre, const RoleCensus& post);

// Token block fed to extract_kv: the chunk's concatenated tokens plus the
// metadata recorded on each resulting cache entry.
struct TokenBlock {
    std::vector<int> tokens;
    std::vector<TokenRole> roles;
    int64_t start_position = 0;
    int chunk_index = 0;
};

// Runs the chunk through the model conditioned on memory_prev and returns the
// chunk's own KV entries for every layer. memory_prev is not modified.
KvMemory extract_kv(const ToyTransformer& model, const KvMemory& memory_prev,
                    const TokenBlock& chunk);

}  // namespace lapkv
