#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lapkv/kvmem.hpp"
#include "lapkv/tensor.hpp"

namespace lapkv {

enum class AttnReduce { Mean, Sum };

struct ModelConfig {
    int num_layers = 4;
    int num_heads = 4;
    int d_model = 48;
    int vocab_size = 64;
    int max_position = 16384;
    double rope_base = 10000.0;
    // How per-head attention is collapsed into the traced weights.
    AttnReduce attn_reduce = AttnReduce::Mean;

    int head_dim() const { return d_model / num_heads; }
    int mlp_dim() const { return 4 * d_model; }
    void validate() const;
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;        // [d, d]
    Matrix w_up;                  // [d, 4d]
    Matrix w_down;                // [4d, d]
    std::vector<double> attn_gain;  // [d] pre-attention RMS norm gain
    std::vector<double> mlp_gain;   // [d] pre-MLP RMS norm gain
};

// Pre-norm decoder-only transformer, fp64, no dropout. Weights are immutable
// after construction and safe to share across threads.
struct ToyTransformer {
    ModelConfig config;
    Matrix embed;    // [vocab, d]
    Matrix unembed;  // [d, vocab]
    std::vector<double> final_gain;
    std::vector<LayerWeights> layers;

    static ToyTransformer random_init(const ModelConfig& config, uint64_t seed);
    size_t parameter_count() const;
    void validate() const;
};

struct TraceFlags {
    bool attention = false;  // head-reduced attention rows per layer
    bool hidden = false;     // per-layer input hidden states
    bool kv = false;         // keys/values produced by the new tokens
};

// Everything a forward pass can surface. logits[b] is [T, vocab];
// attention[l][b] is [T, memory_lens[l] + T] with masked self columns zero;
// hidden[l][b] is the input to layer l, so hidden[0] is the token embeddings.
struct ForwardTrace {
    std::vector<Matrix> logits;
    std::vector<std::vector<Matrix>> attention;
    std::vector<std::vector<Matrix>> hidden;
    std::vector<int> memory_lens;
    std::vector<int64_t> positions;
    // captured per layer for the first batch row (extraction path)
    std::vector<Matrix> new_keys, new_values;
};

// Rotary encoding of one d_model-wide row (all heads), in place.
void rope_rotate(double* row, int64_t delta_position, const ModelConfig& config);

// Forward over a batch of equal-length rows. Every row attends to the shared
// memory plus its own causal prefix; rows never attend to each other.
// positions are absolute and shared across rows; memory is not mutated.
ForwardTrace forward_batch(const ToyTransformer& model, const KvMemory& memory,
                           const std::vector<std::vector<int>>& rows,
                           const std::vector<int64_t>& positions, TraceFlags flags);

ForwardTrace forward(const ToyTransformer& model, const KvMemory& memory,
                     const std::vector<int>& tokens, const std::vector<int64_t>& positions,
                     TraceFlags flags);

// Convenience: positions continue right after memory.max_position().
ForwardTrace forward(const ToyTransformer& model, const KvMemory& memory,
                     const std::vector<int>& tokens, TraceFlags flags = {});

// Resumes computation at start_layer from previously captured hidden states
// (one [T, d] matrix per batch row). Only memory layers >= start_layer are
// consulted. With an unpruned suffix this reproduces the full forward.
ForwardTrace forward_from_layer(const ToyTransformer& model, const KvMemory& memory,
                                const std::vector<Matrix>& hidden_l, int start_layer,
                                const std::vector<int64_t>& positions, TraceFlags flags);

}  // namespace lapkv
