#include "lapkv/kvmem.hpp"

#include <stdexcept>

#include "lapkv/model.hpp"

namespace lapkv {

const char* role_name(TokenRole r) {
    switch (r) {
        case TokenRole::System: return "system";
        case TokenRole::Image: return "image";
        case TokenRole::Question: return "question";
        case TokenRole::Answer: return "answer";
    }
    return "unknown";
}

KvMemory KvMemory::empty(int num_layers, int d_model) {
    KvMemory m;
    m.layers.resize(num_layers);
    for (KvLayer& l : m.layers) {
        l.keys = Matrix(0, d_model);
        l.values = Matrix(0, d_model);
    }
    return m;
}

int64_t KvMemory::max_position() const {
    int64_t mx = -1;
    for (const KvLayer& l : layers) {
        if (!l.positions.empty()) mx = std::max(mx, l.positions.back());
    }
    return mx;
}

size_t KvMemory::total_entries() const {
    size_t n = 0;
    for (const KvLayer& l : layers) n += static_cast<size_t>(l.count());
    return n;
}

void KvMemory::validate() const {
    for (const KvLayer& l : layers) {
        const size_t n = static_cast<size_t>(l.count());
        if (l.positions.size() != n || l.roles.size() != n || l.source_chunk.size() != n ||
            l.values.rows != l.keys.rows || l.values.cols != l.keys.cols) {
            throw std::invalid_argument("KvMemory: inconsistent layer arrays");
        }
        for (size_t i = 1; i < n; ++i) {
            if (l.positions[i] <= l.positions[i - 1]) {
                throw std::invalid_argument("KvMemory: positions must be strictly increasing");
            }
        }
    }
}

KvMemory concat(const KvMemory& a, const KvMemory& b) {
    if (a.num_layers() != b.num_layers()) {
        throw std::invalid_argument("concat: layer count mismatch");
    }
    KvMemory out = a;
    for (int l = 0; l < a.num_layers(); ++l) {
        const KvLayer& src = b.layers[l];
        KvLayer& dst = out.layers[l];
        if (src.count() == 0) continue;
        if (dst.count() > 0 && src.positions.front() <= dst.positions.back()) {
            throw std::invalid_argument("concat: position interleaving between memories");
        }
        if (dst.count() == 0) {
            dst = src;
            continue;
        }
        const int d = dst.keys.cols;
        Matrix keys(dst.count() + src.count(), d);
        Matrix values(dst.count() + src.count(), d);
        std::copy(dst.keys.data.begin(), dst.keys.data.end(), keys.data.begin());
        std::copy(src.keys.data.begin(), src.keys.data.end(),
                  keys.data.begin() + dst.keys.size());
        std::copy(dst.values.data.begin(), dst.values.data.end(), values.data.begin());
        std::copy(src.values.data.begin(), src.values.data.end(),
                  values.data.begin() + dst.values.size());
        dst.keys = std::move(keys);
        dst.values = std::move(values);
        dst.positions.insert(dst.positions.end(), src.positions.begin(), src.positions.end());
        dst.roles.insert(dst.roles.end(), src.roles.begin(), src.roles.end());
        dst.source_chunk.insert(dst.source_chunk.end(), src.source_chunk.begin(),
                                src.source_chunk.end());
    }
    return out;
}

void prune_layer_inplace(KvMemory& memory, const LayerSelection& selection) {
    if (selection.layer < 0 || selection.layer >= memory.num_layers()) {
        throw std::invalid_argument("prune_layer: layer out of range");
    }
    KvLayer& layer = memory.layers[selection.layer];
    if (selection.kept.empty()) {
        throw std::invalid_argument("prune_layer: a layer must retain at least one token");
    }
    const int n = layer.count();
    int prev = -1;
    for (int idx : selection.kept) {
        if (idx < 0 || idx >= n) throw std::invalid_argument("prune_layer: index out of bounds");
        if (idx <= prev) throw std::invalid_argument("prune_layer: indices must be ascending and unique");
        prev = idx;
    }

    const int d = layer.keys.cols;
    const int m = static_cast<int>(selection.kept.size());
    KvLayer out;
    out.keys = Matrix(m, d);
    out.values = Matrix(m, d);
    out.positions.reserve(m);
    out.roles.reserve(m);
    out.source_chunk.reserve(m);
    for (int i = 0; i < m; ++i) {
        const int src = selection.kept[i];
        std::copy(layer.keys.row(src), layer.keys.row(src) + d, out.keys.row(i));
        std::copy(layer.values.row(src), layer.values.row(src) + d, out.values.row(i));
        out.positions.push_back(layer.positions[src]);
        out.roles.push_back(layer.roles[src]);
        out.source_chunk.push_back(layer.source_chunk[src]);
    }
    layer = std::move(out);
}

KvMemory prune_layer(const KvMemory& memory, const LayerSelection& selection) {
    KvMemory out = memory;
    prune_layer_inplace(out, selection);
    return out;
}

RoleCensus role_census(const KvMemory& memory) {
    RoleCensus c;
    c.per_layer.resize(memory.num_layers());
    for (int l = 0; l < memory.num_layers(); ++l) {
        c.per_layer[l] = {0, 0, 0, 0};
        for (TokenRole r : memory.layers[l].roles) {
            c.per_layer[l][static_cast<int>(r)] += 1;
            c.totals[static_cast<int>(r)] += 1;
        }
    }
    return c;
}

RoleCensus census_diff(const RoleCensus& pre, const RoleCensus& post) {
    if (pre.per_layer.size() != post.per_layer.size()) {
        throw std::invalid_argument("census_diff: layer count mismatch");
    }
    RoleCensus out;
    out.per_layer.resize(pre.per_layer.size());
    for (size_t l = 0; l < pre.per_layer.size(); ++l) {
        for (int r = 0; r < 4; ++r) {
            const int64_t d = pre.per_layer[l][r] - post.per_layer[l][r];
            if (d < 0) throw std::invalid_argument("census_diff: post census exceeds pre census");
            out.per_layer[l][r] = d;
            out.totals[r] += d;
        }
    }
    return out;
}

KvMemory extract_kv(const ToyTransformer& model, const KvMemory& memory_prev,
                    const TokenBlock& chunk) {
    if (chunk.tokens.size() != chunk.roles.size()) {
        throw std::invalid_argument("extract_kv: token/role length mismatch");
    }
    const int T = static_cast<int>(chunk.tokens.size());
    std::vector<int64_t> positions(T);
    for (int t = 0; t < T; ++t) positions[t] = chunk.start_position + t;

    TraceFlags flags;
    flags.kv = true;
    ForwardTrace trace = forward(model, memory_prev, chunk.tokens, positions, flags);

    KvMemory out;
    out.layers.resize(model.config.num_layers);
    for (int l = 0; l < model.config.num_layers; ++l) {
        KvLayer& layer = out.layers[l];
        layer.keys = std::move(trace.new_keys[l]);
        layer.values = std::move(trace.new_values[l]);
        layer.positions = positions;
        layer.roles = chunk.roles;
        layer.source_chunk.assign(T, chunk.chunk_index);
    }
    return out;
}

}  // namespace lapkv
