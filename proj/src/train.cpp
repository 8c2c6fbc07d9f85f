#include "lapkv/train.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <thread>

namespace lapkv {

namespace {

constexpr double kNormEps = 1e-6;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// RMS norm saving the per-row inverse scale for the backward pass.
Matrix rms_norm_fwd(const Matrix& x, const std::vector<double>& gain, std::vector<double>& inv) {
    Matrix out(x.rows, x.cols);
    inv.resize(x.rows);
    for (int r = 0; r < x.rows; ++r) {
        const double* in = x.row(r);
        double ms = 0.0;
        for (int c = 0; c < x.cols; ++c) ms += in[c] * in[c];
        inv[r] = 1.0 / std::sqrt(ms / x.cols + kNormEps);
        double* o = out.row(r);
        for (int c = 0; c < x.cols; ++c) o[c] = in[c] * inv[r] * gain[c];
    }
    return out;
}

// dx and dgain from dout; x is the norm input saved in the forward pass.
void rms_norm_bwd(const Matrix& x, const std::vector<double>& inv,
                  const std::vector<double>& gain, const Matrix& dout, Matrix& dx,
                  std::vector<double>& dgain) {
    const int d = x.cols;
    for (int r = 0; r < x.rows; ++r) {
        const double* xr = x.row(r);
        const double* dor = dout.row(r);
        double* dxr = dx.row(r);
        double dot = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dy = dor[c] * gain[c];
            dgain[c] += dor[c] * xr[c] * inv[r];
            dot += dy * xr[c];
        }
        const double k = inv[r] * inv[r] * dot / d;
        for (int c = 0; c < d; ++c) {
            const double dy = dor[c] * gain[c];
            dxr[c] += inv[r] * (dy - xr[c] * k);
        }
    }
}

struct LayerCache {
    Matrix x_in;                 // residual stream entering the layer
    std::vector<double> inv1;    // attn-norm inverse scales
    Matrix a;                    // normed+gained attention input
    Matrix q, k, v;              // q,k carry rotary encoding
    std::vector<Matrix> probs;   // per-head causal attention [T,T]
    Matrix attn_concat;          // pre-wo head concat
    Matrix x_mid;                // after attention residual
    std::vector<double> inv2;    // mlp-norm inverse scales
    Matrix b;                    // normed+gained mlp input
    Matrix up;                   // pre-activation
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Matrix x_final;
    std::vector<double> inv_final;
    Matrix f;       // final normed
    Matrix logits;
};

void run_forward(const ToyTransformer& model, const std::vector<int>& tokens,
                 ForwardCache& cache) {
    const ModelConfig& cfg = model.config;
    const int T = static_cast<int>(tokens.size());
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix x(T, cfg.d_model);
    for (int t = 0; t < T; ++t) {
        const int id = tokens[t];
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::invalid_argument("train: token id out of vocabulary");
        }
        std::copy(model.embed.row(id), model.embed.row(id) + cfg.d_model, x.row(t));
    }

    cache.layers.resize(cfg.num_layers);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = model.layers[l];
        LayerCache& lc = cache.layers[l];
        lc.x_in = x;

        lc.a = rms_norm_fwd(x, lw.attn_gain, lc.inv1);
        lc.q = matmul(lc.a, lw.wq);
        lc.k = matmul(lc.a, lw.wk);
        lc.v = matmul(lc.a, lw.wv);
        for (int t = 0; t < T; ++t) {
            rope_rotate(lc.q.row(t), t, cfg);
            rope_rotate(lc.k.row(t), t, cfg);
        }

        lc.probs.assign(cfg.num_heads, Matrix());
        lc.attn_concat = Matrix(T, cfg.d_model);
        Matrix qh(T, hd), kh(T, hd), vh(T, hd);
        for (int h = 0; h < cfg.num_heads; ++h) {
            const int off = h * hd;
            for (int t = 0; t < T; ++t) {
                std::copy(lc.q.row(t) + off, lc.q.row(t) + off + hd, qh.row(t));
                std::copy(lc.k.row(t) + off, lc.k.row(t) + off + hd, kh.row(t));
                std::copy(lc.v.row(t) + off, lc.v.row(t) + off + hd, vh.row(t));
            }
            // causal support only: row t touches columns 0..t
            Matrix p(T, T);
            for (int t = 0; t < T; ++t) {
                const double* __restrict qrow = qh.row(t);
                double* __restrict prow = p.row(t);
                for (int j = 0; j <= t; ++j) {
                    const double* __restrict krow = kh.row(j);
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += qrow[c] * krow[c];
                    prow[j] = s * scale;
                }
                softmax_inplace(prow, t + 1);
            }
            Matrix oh(T, hd);
            for (int t = 0; t < T; ++t) {
                const double* __restrict prow = p.row(t);
                double* __restrict orow = oh.row(t);
                for (int j = 0; j <= t; ++j) {
                    const double w = prow[j];
                    const double* __restrict vrow = vh.row(j);
                    for (int c = 0; c < hd; ++c) orow[c] += w * vrow[c];
                }
            }
            for (int t = 0; t < T; ++t) {
                std::copy(oh.row(t), oh.row(t) + hd, lc.attn_concat.row(t) + off);
            }
            lc.probs[h] = std::move(p);
        }
        matmul_acc(lc.attn_concat, lw.wo, x);
        lc.x_mid = x;

        lc.b = rms_norm_fwd(x, lw.mlp_gain, lc.inv2);
        lc.up = matmul(lc.b, lw.w_up);
        Matrix act = lc.up;
        for (double& u : act.data) u = u * sigmoid(u);
        matmul_acc(act, lw.w_down, x);
    }

    cache.x_final = x;
    cache.f = rms_norm_fwd(x, model.final_gain, cache.inv_final);
    cache.logits = matmul(cache.f, model.unembed);
}

// Cross-entropy over masked next-token targets; fills dlogits when requested.
double masked_loss(const Matrix& logits, const std::vector<int>& tokens, int target_lo,
                   int target_hi, Matrix* dlogits) {
    const int T = logits.rows;
    const int V = logits.cols;
    std::vector<int> pos;
    for (int t = 0; t + 1 < T; ++t) {
        const int tgt = tokens[t + 1];
        if (target_lo >= 0 && (tgt < target_lo || tgt >= target_hi)) continue;
        pos.push_back(t);
    }
    if (pos.empty()) throw std::invalid_argument("train: sequence has no supervised positions");

    double loss = 0.0;
    const double w = 1.0 / static_cast<double>(pos.size());
    for (int t : pos) {
        std::vector<double> p(logits.row(t), logits.row(t) + V);
        softmax_inplace(p.data(), V);
        const int tgt = tokens[t + 1];
        loss -= std::log(std::max(p[tgt], 1e-300));
        if (dlogits) {
            double* drow = dlogits->row(t);
            for (int j = 0; j < V; ++j) drow[j] = p[j] * w;
            drow[tgt] -= w;
        }
    }
    return loss * w;
}

}  // namespace

ParamGrads ParamGrads::zeros_like(const ToyTransformer& model) {
    ParamGrads g;
    g.embed = Matrix(model.embed.rows, model.embed.cols);
    g.unembed = Matrix(model.unembed.rows, model.unembed.cols);
    g.final_gain.assign(model.final_gain.size(), 0.0);
    g.layers.resize(model.layers.size());
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const LayerWeights& lw = model.layers[l];
        LayerWeights& gl = g.layers[l];
        gl.wq = Matrix(lw.wq.rows, lw.wq.cols);
        gl.wk = Matrix(lw.wk.rows, lw.wk.cols);
        gl.wv = Matrix(lw.wv.rows, lw.wv.cols);
        gl.wo = Matrix(lw.wo.rows, lw.wo.cols);
        gl.w_up = Matrix(lw.w_up.rows, lw.w_up.cols);
        gl.w_down = Matrix(lw.w_down.rows, lw.w_down.cols);
        gl.attn_gain.assign(lw.attn_gain.size(), 0.0);
        gl.mlp_gain.assign(lw.mlp_gain.size(), 0.0);
    }
    return g;
}

void ParamGrads::zero() {
    embed.zero();
    unembed.zero();
    std::fill(final_gain.begin(), final_gain.end(), 0.0);
    for (LayerWeights& gl : layers) {
        gl.wq.zero();
        gl.wk.zero();
        gl.wv.zero();
        gl.wo.zero();
        gl.w_up.zero();
        gl.w_down.zero();
        std::fill(gl.attn_gain.begin(), gl.attn_gain.end(), 0.0);
        std::fill(gl.mlp_gain.begin(), gl.mlp_gain.end(), 0.0);
    }
}

std::vector<ParamView> param_views(ToyTransformer& model, ParamGrads& grads) {
    std::vector<ParamView> views;
    auto add = [&views](const std::string& name, std::vector<double>& p, std::vector<double>& g) {
        views.push_back({name, p.data(), g.data(), p.size()});
    };
    auto addm = [&views](const std::string& name, Matrix& p, Matrix& g) {
        views.push_back({name, p.data.data(), g.data.data(), p.size()});
    };
    addm("embed", model.embed, grads.embed);
    addm("unembed", model.unembed, grads.unembed);
    add("final_gain", model.final_gain, grads.final_gain);
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        addm(p + "wq", model.layers[l].wq, grads.layers[l].wq);
        addm(p + "wk", model.layers[l].wk, grads.layers[l].wk);
        addm(p + "wv", model.layers[l].wv, grads.layers[l].wv);
        addm(p + "wo", model.layers[l].wo, grads.layers[l].wo);
        addm(p + "w_up", model.layers[l].w_up, grads.layers[l].w_up);
        addm(p + "w_down", model.layers[l].w_down, grads.layers[l].w_down);
        add(p + "attn_gain", model.layers[l].attn_gain, grads.layers[l].attn_gain);
        add(p + "mlp_gain", model.layers[l].mlp_gain, grads.layers[l].mlp_gain);
    }
    return views;
}

double sequence_loss(const ToyTransformer& model, const std::vector<int>& tokens,
                     int target_lo, int target_hi) {
    ForwardCache cache;
    run_forward(model, tokens, cache);
    return masked_loss(cache.logits, tokens, target_lo, target_hi, nullptr);
}

double sequence_loss_grad(const ToyTransformer& model, const std::vector<int>& tokens,
                          int target_lo, int target_hi, ParamGrads& grads) {
    const ModelConfig& cfg = model.config;
    const int T = static_cast<int>(tokens.size());
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    ForwardCache cache;
    run_forward(model, tokens, cache);
    Matrix dlogits(T, cfg.vocab_size);
    const double loss = masked_loss(cache.logits, tokens, target_lo, target_hi, &dlogits);

    // unembed and final norm
    matmul_tn_acc(cache.f, dlogits, grads.unembed);
    Matrix df = matmul_nt(dlogits, model.unembed);
    Matrix dx(T, cfg.d_model);
    rms_norm_bwd(cache.x_final, cache.inv_final, model.final_gain, df, dx, grads.final_gain);

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = model.layers[l];
        LayerWeights& gl = grads.layers[l];
        const LayerCache& lc = cache.layers[l];

        // MLP block: x_{l+1} = x_mid + silu(b W_up) W_down
        Matrix act = lc.up;
        for (double& u : act.data) u = u * sigmoid(u);
        matmul_tn_acc(act, dx, gl.w_down);
        Matrix dact = matmul_nt(dx, lw.w_down);
        for (size_t i = 0; i < dact.size(); ++i) {
            const double u = lc.up.data[i];
            const double s = sigmoid(u);
            dact.data[i] *= s * (1.0 + u * (1.0 - s));
        }
        matmul_tn_acc(lc.b, dact, gl.w_up);
        Matrix db = matmul_nt(dact, lw.w_up);
        Matrix dx_mid = dx;  // residual branch
        rms_norm_bwd(lc.x_mid, lc.inv2, lw.mlp_gain, db, dx_mid, gl.mlp_gain);

        // attention block: x_mid = x_in + (heads(a)) Wo
        matmul_tn_acc(lc.attn_concat, dx_mid, gl.wo);
        Matrix dconcat = matmul_nt(dx_mid, lw.wo);

        Matrix dq(T, cfg.d_model), dk(T, cfg.d_model), dv(T, cfg.d_model);
        Matrix qh(T, hd), kh(T, hd), vh(T, hd), doh(T, hd);
        for (int h = 0; h < cfg.num_heads; ++h) {
            const int off = h * hd;
            const Matrix& p = lc.probs[h];
            for (int t = 0; t < T; ++t) {
                std::copy(lc.q.row(t) + off, lc.q.row(t) + off + hd, qh.row(t));
                std::copy(lc.k.row(t) + off, lc.k.row(t) + off + hd, kh.row(t));
                std::copy(lc.v.row(t) + off, lc.v.row(t) + off + hd, vh.row(t));
                std::copy(dconcat.row(t) + off, dconcat.row(t) + off + hd, doh.row(t));
            }
            // all products below walk the causal support only
            Matrix dp(T, T);
            Matrix dvh(T, hd);
            for (int t = 0; t < T; ++t) {
                const double* __restrict dorow = doh.row(t);
                const double* __restrict prow = p.row(t);
                double* __restrict dprow = dp.row(t);
                for (int j = 0; j <= t; ++j) {
                    const double* __restrict vrow = vh.row(j);
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += dorow[c] * vrow[c];
                    dprow[j] = s;
                    const double w = prow[j];
                    double* __restrict dvrow = dvh.row(j);
                    for (int c = 0; c < hd; ++c) dvrow[c] += w * dorow[c];
                }
                double dot = 0.0;
                for (int j = 0; j <= t; ++j) dot += dprow[j] * prow[j];
                for (int j = 0; j <= t; ++j) dprow[j] = prow[j] * (dprow[j] - dot) * scale;
            }
            Matrix dqh(T, hd);
            Matrix dkh(T, hd);
            for (int t = 0; t < T; ++t) {
                const double* __restrict dprow = dp.row(t);
                const double* __restrict qrow = qh.row(t);
                double* __restrict dqrow = dqh.row(t);
                for (int j = 0; j <= t; ++j) {
                    const double ds = dprow[j];
                    const double* __restrict krow = kh.row(j);
                    double* __restrict dkrow = dkh.row(j);
                    for (int c = 0; c < hd; ++c) {
                        dqrow[c] += ds * krow[c];
                        dkrow[c] += ds * qrow[c];
                    }
                }
            }
            for (int t = 0; t < T; ++t) {
                for (int c = 0; c < hd; ++c) {
                    dq.row(t)[off + c] += dqh.at(t, c);
                    dk.row(t)[off + c] += dkh.at(t, c);
                    dv.row(t)[off + c] += dvh.at(t, c);
                }
            }
        }
        // undo the rotary encoding on the gradients
        for (int t = 0; t < T; ++t) {
            rope_rotate(dq.row(t), -static_cast<int64_t>(t), cfg);
            rope_rotate(dk.row(t), -static_cast<int64_t>(t), cfg);
        }

        matmul_tn_acc(lc.a, dq, gl.wq);
        matmul_tn_acc(lc.a, dk, gl.wk);
        matmul_tn_acc(lc.a, dv, gl.wv);
        Matrix da = matmul_nt(dq, lw.wq);
        matmul_nt_acc(dk, lw.wk, da);
        matmul_nt_acc(dv, lw.wv, da);

        Matrix dx_in = dx_mid;  // residual branch
        rms_norm_bwd(lc.x_in, lc.inv1, lw.attn_gain, da, dx_in, gl.attn_gain);
        dx = std::move(dx_in);
    }

    for (int t = 0; t < T; ++t) {
        double* grow = grads.embed.row(tokens[t]);
        const double* drow = dx.row(t);
        for (int c = 0; c < cfg.d_model; ++c) grow[c] += drow[c];
    }
    return loss;
}

TrainResult train(ToyTransformer& model, const std::vector<std::vector<int>>& dataset,
                  const TrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    if (cfg.learning_rate < 0.0) throw std::invalid_argument("train: negative learning rate");
    if (cfg.batch_size < 1 || cfg.steps < 0) throw std::invalid_argument("train: bad schedule");

    Rng rng(cfg.seed);
    ParamGrads grads = ParamGrads::zeros_like(model);
    ParamGrads slot1 = ParamGrads::zeros_like(model);  // sgd velocity / adam first moment
    ParamGrads slot2 = ParamGrads::zeros_like(model);  // adam second moment
    auto views = param_views(model, grads);
    auto m_views = param_views(model, slot1);
    auto v_views = param_views(model, slot2);

    const int workers = std::max(1, std::min(cfg.threads, cfg.batch_size));
    std::vector<ParamGrads> worker_grads;
    for (int w = 1; w < workers; ++w) worker_grads.push_back(ParamGrads::zeros_like(model));

    TrainResult result;
    result.losses.reserve(cfg.steps);
    std::vector<int> picks(cfg.batch_size);
    std::vector<double> item_loss(cfg.batch_size);
    for (int step = 0; step < cfg.steps; ++step) {
        grads.zero();
        for (int b = 0; b < cfg.batch_size; ++b) {
            picks[b] = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);
        }
        // batch items are independent; each worker accumulates into its own
        // buffer and buffers merge in worker order for a scheduling-free sum
        auto run_span = [&](int begin, int end, ParamGrads& g) {
            for (int b = begin; b < end; ++b) {
                item_loss[b] = sequence_loss_grad(model, dataset[picks[b]], cfg.target_lo,
                                                  cfg.target_hi, g);
            }
        };
        if (workers == 1) {
            run_span(0, cfg.batch_size, grads);
        } else {
            for (ParamGrads& g : worker_grads) g.zero();
            const int per = (cfg.batch_size + workers - 1) / workers;
            std::vector<std::thread> pool;
            for (int w = 1; w < workers; ++w) {
                const int begin = std::min(cfg.batch_size, w * per);
                const int end = std::min(cfg.batch_size, begin + per);
                if (begin < end) {
                    pool.emplace_back(run_span, begin, end, std::ref(worker_grads[w - 1]));
                }
            }
            run_span(0, std::min(cfg.batch_size, per), grads);
            for (auto& th : pool) th.join();
            for (int w = 1; w < workers; ++w) {
                ParamGrads& g = worker_grads[w - 1];
                auto gv = param_views(model, g);
                for (size_t i = 0; i < views.size(); ++i) {
                    for (size_t j = 0; j < views[i].len; ++j) {
                        views[i].grad[j] += gv[i].grad[j];
                    }
                }
            }
        }
        double loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) loss += item_loss[b];
        loss /= cfg.batch_size;
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train: loss is non-finite at step " + std::to_string(step));
        }
        result.losses.push_back(loss);

        const double gw = 1.0 / cfg.batch_size;
        if (cfg.optimizer == Optimizer::Sgd) {
            for (size_t i = 0; i < views.size(); ++i) {
                double* p = views[i].param;
                double* g = views[i].grad;
                double* v = m_views[i].grad;
                for (size_t j = 0; j < views[i].len; ++j) {
                    v[j] = cfg.momentum * v[j] - cfg.learning_rate * g[j] * gw;
                    p[j] += v[j];
                }
            }
        } else {
            const double b1 = cfg.adam_beta1;
            const double b2 = cfg.adam_beta2;
            const double bias1 = 1.0 - std::pow(b1, step + 1);
            const double bias2 = 1.0 - std::pow(b2, step + 1);
            for (size_t i = 0; i < views.size(); ++i) {
                double* p = views[i].param;
                double* g = views[i].grad;
                double* m = m_views[i].grad;
                double* v = v_views[i].grad;
                for (size_t j = 0; j < views[i].len; ++j) {
                    const double gj = g[j] * gw;
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    const double mhat = m[j] / bias1;
                    const double vhat = v[j] / bias2;
                    p[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
                }
            }
        }
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
            std::fprintf(stderr, "step %d loss %.6f\n", step, loss);
        }
    }
    return result;
}

}  // namespace lapkv
