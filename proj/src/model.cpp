#include "lapkv/model.hpp"

#include <cmath>
#include <stdexcept>

namespace lapkv {

namespace {

constexpr double kNormEps = 1e-6;

Matrix rms_norm(const Matrix& x, const std::vector<double>& gain) {
    Matrix out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) {
        const double* in = x.row(r);
        double* o = out.row(r);
        double ms = 0.0;
        for (int c = 0; c < x.cols; ++c) ms += in[c] * in[c];
        const double inv = 1.0 / std::sqrt(ms / x.cols + kNormEps);
        for (int c = 0; c < x.cols; ++c) o[c] = in[c] * inv * gain[c];
    }
    return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

void ModelConfig::validate() const {
    if (num_layers < 2) throw std::invalid_argument("ModelConfig: num_layers must be >= 2");
    if (num_heads < 1) throw std::invalid_argument("ModelConfig: num_heads must be >= 1");
    if (d_model < 1 || d_model % num_heads != 0) {
        throw std::invalid_argument("ModelConfig: d_model must be positive and divisible by num_heads");
    }
    if (head_dim() % 2 != 0) throw std::invalid_argument("ModelConfig: head_dim must be even for rotary encoding");
    if (vocab_size < 1) throw std::invalid_argument("ModelConfig: vocab_size must be positive");
    if (max_position < 1) throw std::invalid_argument("ModelConfig: max_position must be positive");
    if (!(rope_base > 0.0)) throw std::invalid_argument("ModelConfig: rope_base must be positive");
}

ToyTransformer ToyTransformer::random_init(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ToyTransformer m;
    m.config = config;
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const double down_std = 1.0 / std::sqrt(static_cast<double>(config.mlp_dim()));

    m.embed = Matrix(config.vocab_size, config.d_model);
    fill_normal(m.embed, rng, proj_std);
    m.unembed = Matrix(config.d_model, config.vocab_size);
    fill_normal(m.unembed, rng, proj_std);
    m.final_gain.assign(config.d_model, 1.0);

    m.layers.resize(config.num_layers);
    for (LayerWeights& lw : m.layers) {
        lw.wq = Matrix(config.d_model, config.d_model);
        lw.wk = Matrix(config.d_model, config.d_model);
        lw.wv = Matrix(config.d_model, config.d_model);
        lw.wo = Matrix(config.d_model, config.d_model);
        lw.w_up = Matrix(config.d_model, config.mlp_dim());
        lw.w_down = Matrix(config.mlp_dim(), config.d_model);
        fill_normal(lw.wq, rng, proj_std);
        fill_normal(lw.wk, rng, proj_std);
        fill_normal(lw.wv, rng, proj_std);
        fill_normal(lw.wo, rng, proj_std);
        fill_normal(lw.w_up, rng, proj_std);
        fill_normal(lw.w_down, rng, down_std);
        lw.attn_gain.assign(config.d_model, 1.0);
        lw.mlp_gain.assign(config.d_model, 1.0);
    }
    return m;
}

size_t ToyTransformer::parameter_count() const {
    size_t n = embed.size() + unembed.size() + final_gain.size();
    for (const LayerWeights& lw : layers) {
        n += lw.wq.size() + lw.wk.size() + lw.wv.size() + lw.wo.size();
        n += lw.w_up.size() + lw.w_down.size();
        n += lw.attn_gain.size() + lw.mlp_gain.size();
    }
    return n;
}

void ToyTransformer::validate() const {
    config.validate();
    auto expect = [](const Matrix& m, int r, int c, const char* name) {
        if (m.rows != r || m.cols != c) {
            throw std::invalid_argument(std::string("ToyTransformer: bad shape for ") + name);
        }
        if (!all_finite(m)) {
            throw std::invalid_argument(std::string("ToyTransformer: non-finite entries in ") + name);
        }
    };
    expect(embed, config.vocab_size, config.d_model, "embed");
    expect(unembed, config.d_model, config.vocab_size, "unembed");
    if (static_cast<int>(layers.size()) != config.num_layers) {
        throw std::invalid_argument("ToyTransformer: layer count mismatch");
    }
    for (const LayerWeights& lw : layers) {
        expect(lw.wq, config.d_model, config.d_model, "wq");
        expect(lw.wk, config.d_model, config.d_model, "wk");
        expect(lw.wv, config.d_model, config.d_model, "wv");
        expect(lw.wo, config.d_model, config.d_model, "wo");
        expect(lw.w_up, config.d_model, config.mlp_dim(), "w_up");
        expect(lw.w_down, config.mlp_dim(), config.d_model, "w_down");
    }
}

void rope_rotate(double* row, int64_t delta_position, const ModelConfig& config) {
    const int hd = config.head_dim();
    const int half = hd / 2;
    for (int h = 0; h < config.num_heads; ++h) {
        double* v = row + h * hd;
        for (int i = 0; i < half; ++i) {
            const double freq = std::pow(config.rope_base, -2.0 * i / hd);
            const double theta = static_cast<double>(delta_position) * freq;
            const double c = std::cos(theta);
            const double s = std::sin(theta);
            const double x = v[i];
            const double y = v[i + half];
            v[i] = x * c - y * s;
            v[i + half] = y * c + x * s;
        }
    }
}

namespace {

// Shared body of forward_batch and forward_from_layer: runs layers
// [start_layer, L) over per-row residual streams.
ForwardTrace run_layers(const ToyTransformer& model, const KvMemory& memory,
                        std::vector<Matrix> x,  // one [T, d] per row, consumed
                        int start_layer, const std::vector<int64_t>& positions,
                        TraceFlags flags) {
    const ModelConfig& cfg = model.config;
    const int L = cfg.num_layers;
    const int B = static_cast<int>(x.size());
    const int T = x.empty() ? 0 : x[0].rows;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (memory.num_layers() != L) {
        throw std::invalid_argument("forward: memory layer count does not match model");
    }
    if (static_cast<int>(positions.size()) != T) {
        throw std::invalid_argument("forward: positions length does not match tokens");
    }
    for (int t = 0; t < T; ++t) {
        if (positions[t] >= cfg.max_position) {
            throw std::invalid_argument("forward: position overflow beyond max_position");
        }
        if (t > 0 && positions[t] <= positions[t - 1]) {
            throw std::invalid_argument("forward: positions must be strictly increasing");
        }
    }
    if (T > 0 && memory.max_position() >= positions[0]) {
        throw std::invalid_argument("forward: new positions must come after every cached position");
    }

    ForwardTrace trace;
    trace.positions = positions;
    trace.memory_lens.resize(L, 0);
    for (int l = 0; l < L; ++l) trace.memory_lens[l] = memory.layers[l].count();
    if (flags.attention) trace.attention.resize(L);
    if (flags.hidden) trace.hidden.resize(L);
    if (flags.kv) {
        trace.new_keys.resize(L);
        trace.new_values.resize(L);
    }

    std::vector<double> scores;
    for (int l = start_layer; l < L; ++l) {
        const LayerWeights& lw = model.layers[l];
        const KvLayer& mem = memory.layers[l];
        const int mcount = mem.count();
        if (mcount > 0 && mem.keys.cols != cfg.d_model) {
            throw std::invalid_argument("forward: memory width does not match model");
        }
        if (flags.hidden) trace.hidden[l].resize(B);
        if (flags.attention) trace.attention[l].resize(B);
        scores.resize(static_cast<size_t>(mcount) + T);

        for (int b = 0; b < B; ++b) {
            if (flags.hidden) trace.hidden[l][b] = x[b];

            Matrix a = rms_norm(x[b], lw.attn_gain);
            Matrix q = matmul(a, lw.wq);
            Matrix k = matmul(a, lw.wk);
            Matrix v = matmul(a, lw.wv);
            for (int t = 0; t < T; ++t) {
                rope_rotate(q.row(t), positions[t], cfg);
                rope_rotate(k.row(t), positions[t], cfg);
            }
            if (flags.kv && b == 0) {
                trace.new_keys[l] = k;
                trace.new_values[l] = v;
            }

            Matrix attn_out(T, cfg.d_model);
            Matrix* arec = nullptr;
            if (flags.attention) {
                trace.attention[l][b] = Matrix(T, mcount + T);
                arec = &trace.attention[l][b];
            }
            const double head_w =
                cfg.attn_reduce == AttnReduce::Mean ? 1.0 / cfg.num_heads : 1.0;

            for (int h = 0; h < cfg.num_heads; ++h) {
                const int off = h * hd;
                for (int t = 0; t < T; ++t) {
                    const double* qh = q.row(t) + off;
                    const int n = mcount + t + 1;
                    for (int j = 0; j < mcount; ++j) {
                        const double* kh = mem.keys.row(j) + off;
                        double s = 0.0;
                        for (int c = 0; c < hd; ++c) s += qh[c] * kh[c];
                        scores[j] = s * scale;
                    }
                    for (int j = 0; j <= t; ++j) {
                        const double* kh = k.row(j) + off;
                        double s = 0.0;
                        for (int c = 0; c < hd; ++c) s += qh[c] * kh[c];
                        scores[mcount + j] = s * scale;
                    }
                    softmax_inplace(scores.data(), n);

                    double* out = attn_out.row(t) + off;
                    for (int j = 0; j < mcount; ++j) {
                        const double w = scores[j];
                        const double* vh = mem.values.row(j) + off;
                        for (int c = 0; c < hd; ++c) out[c] += w * vh[c];
                    }
                    for (int j = 0; j <= t; ++j) {
                        const double w = scores[mcount + j];
                        const double* vh = v.row(j) + off;
                        for (int c = 0; c < hd; ++c) out[c] += w * vh[c];
                    }
                    if (arec) {
                        double* row = arec->row(t);
                        for (int j = 0; j < n; ++j) row[j] += head_w * scores[j];
                    }
                }
            }
            matmul_acc(attn_out, lw.wo, x[b]);

            Matrix mlp_in = rms_norm(x[b], lw.mlp_gain);
            Matrix up = matmul(mlp_in, lw.w_up);
            for (double& u : up.data) u = silu(u);
            matmul_acc(up, lw.w_down, x[b]);
        }
    }

    trace.logits.resize(B);
    for (int b = 0; b < B; ++b) {
        Matrix f = rms_norm(x[b], model.final_gain);
        trace.logits[b] = matmul(f, model.unembed);
        if (!all_finite(trace.logits[b])) {
            throw std::runtime_error("forward: non-finite activation (corrupt weights or inputs)");
        }
    }
    return trace;
}

std::vector<Matrix> embed_rows(const ToyTransformer& model,
                               const std::vector<std::vector<int>>& rows) {
    const ModelConfig& cfg = model.config;
    if (rows.empty()) throw std::invalid_argument("forward: empty batch");
    const size_t T = rows[0].size();
    std::vector<Matrix> x(rows.size());
    for (size_t b = 0; b < rows.size(); ++b) {
        if (rows[b].size() != T) throw std::invalid_argument("forward: ragged batch rows");
        x[b] = Matrix(static_cast<int>(T), cfg.d_model);
        for (size_t t = 0; t < T; ++t) {
            const int id = rows[b][t];
            if (id < 0 || id >= cfg.vocab_size) {
                throw std::invalid_argument("forward: token id out of vocabulary");
            }
            const double* e = model.embed.row(id);
            std::copy(e, e + cfg.d_model, x[b].row(static_cast<int>(t)));
        }
    }
    return x;
}

}  // namespace

ForwardTrace forward_batch(const ToyTransformer& model, const KvMemory& memory,
                           const std::vector<std::vector<int>>& rows,
                           const std::vector<int64_t>& positions, TraceFlags flags) {
    return run_layers(model, memory, embed_rows(model, rows), 0, positions, flags);
}

ForwardTrace forward(const ToyTransformer& model, const KvMemory& memory,
                     const std::vector<int>& tokens, const std::vector<int64_t>& positions,
                     TraceFlags flags) {
    return forward_batch(model, memory, {tokens}, positions, flags);
}

ForwardTrace forward(const ToyTransformer& model, const KvMemory& memory,
                     const std::vector<int>& tokens, TraceFlags flags) {
    std::vector<int64_t> positions(tokens.size());
    const int64_t start = memory.max_position() + 1;
    for (size_t t = 0; t < tokens.size(); ++t) positions[t] = start + static_cast<int64_t>(t);
    return forward(model, memory, tokens, positions, flags);
}

ForwardTrace forward_from_layer(const ToyTransformer& model, const KvMemory& memory,
                                const std::vector<Matrix>& hidden_l, int start_layer,
                                const std::vector<int64_t>& positions, TraceFlags flags) {
    if (start_layer < 0 || start_layer >= model.config.num_layers) {
        throw std::invalid_argument("forward_from_layer: start_layer out of range");
    }
    for (const Matrix& h : hidden_l) {
        if (h.cols != model.config.d_model) {
            throw std::invalid_argument("forward_from_layer: hidden width mismatch");
        }
    }
    return run_layers(model, memory, hidden_l, start_layer, positions, flags);
}

}  // namespace lapkv
