// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pmx {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluAlpha = 0.79788456080286535588;  // sqrt(2/pi)
constexpr double kGeluBeta = 0.044715;

}  // namespace

void ModelConfig::validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0 ||
        seq_len <= 0) {
        throw ValidationError("model config: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ValidationError("model config: d_model must be divisible by n_heads");
    }
}

void LrSchedule::validate() const {
    if (!(0 <= warmup_steps && warmup_steps < cooldown_start && cooldown_start < total_steps)) {
        throw ValidationError("lr schedule: need 0 <= warmup < cooldown_start < total_steps");
    }
    if (base_lr < 0.0) throw ValidationError("lr schedule: negative base lr");
}

double lr_at(const LrSchedule& s, int step) {
    s.validate();
    if (step < 0 || step > s.total_steps) throw ValidationError("lr_at: step out of range");
    if (step < s.warmup_steps) {
        return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    }
    if (step <= s.cooldown_start) return s.base_lr;
    return s.base_lr * static_cast<double>(s.total_steps - step) /
           static_cast<double>(s.total_steps - s.cooldown_start);
}

template <typename T>
Params<T> Params<T>::zeros_like(const ModelConfig& cfg) {
    Params<T> p;
    p.tok_emb = Mat<T>::Zero(cfg.vocab_size, cfg.d_model);
    p.pos_emb = Mat<T>::Zero(cfg.seq_len, cfg.d_model);
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
        l.ln1_g = Vec<T>::Zero(cfg.d_model);
        l.ln1_b = Vec<T>::Zero(cfg.d_model);
        l.ln2_g = Vec<T>::Zero(cfg.d_model);
        l.ln2_b = Vec<T>::Zero(cfg.d_model);
        l.wq = Mat<T>::Zero(cfg.d_model, cfg.d_model);
        l.wk = Mat<T>::Zero(cfg.d_model, cfg.d_model);
        l.wv = Mat<T>::Zero(cfg.d_model, cfg.d_model);
        l.wo = Mat<T>::Zero(cfg.d_model, cfg.d_model);
        l.w1 = Mat<T>::Zero(cfg.d_model, cfg.d_ff);
        l.w2 = Mat<T>::Zero(cfg.d_ff, cfg.d_model);
    }
    p.lnf_g = Vec<T>::Zero(cfg.d_model);
    p.lnf_b = Vec<T>::Zero(cfg.d_model);
    p.head_w = Mat<T>::Zero(cfg.d_model, cfg.vocab_size);
    p.head_b = Vec<T>::Zero(cfg.vocab_size);
    return p;
}

template <typename T>
void Params<T>::set_zero() {
    for_each([](const std::string&, T* data, std::size_t n) {
        std::memset(data, 0, n * sizeof(T));
    });
}

template <typename T>
std::size_t Params<T>::total_size() const {
    std::size_t total = 0;
    for_each([&](const std::string&, const T*, std::size_t n) { total += n; });
    return total;
}

template <typename T>
std::pair<ModelState<T>, OptimizerState<T>> init_model(const ModelConfig& cfg,
                                                       const AdamwHyper& hyper) {
    cfg.validate();
    ModelState<T> state;
    state.config = cfg;
    state.params = Params<T>::zeros_like(cfg);
    state.step = 0;

    Rng rng(mix64(cfg.init_seed, 0x696e6974));
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
    state.params.for_each([&](const std::string& name, T* data, std::size_t n) {
        const bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0;
        const bool is_bias = (name.size() >= 2 && name.compare(name.size() - 2, 2, "_b") == 0) ||
                             name == "head_b";
        if (is_gain) {
            for (std::size_t i = 0; i < n; ++i) data[i] = T(1);
            return;
        }
        if (is_bias) return;  // already zero
        const bool residual_proj = name.find(".wo") != std::string::npos ||
                                   name.find(".w2") != std::string::npos;
        const double std = residual_proj ? resid_std : base_std;
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(rng.normal() * std);
    });

    OptimizerState<T> opt;
    opt.hyper = hyper;
    opt.m = Params<T>::zeros_like(cfg);
    opt.v = Params<T>::zeros_like(cfg);
    opt.t = 0;
    return {std::move(state), std::move(opt)};
}

template <typename T>
void adamw_step(ModelState<T>& state, OptimizerState<T>& opt, const Params<T>& grads, double lr) {
    if (lr < 0.0) throw ValidationError("adamw_step: negative learning rate");
    opt.t += 1;
    const double bc1 = 1.0 - std::pow(opt.hyper.beta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(opt.hyper.beta2, static_cast<double>(opt.t));
    const T beta1 = static_cast<T>(opt.hyper.beta1);
    const T beta2 = static_cast<T>(opt.hyper.beta2);
    const T one_m_b1 = static_cast<T>(1.0 - opt.hyper.beta1);
    const T one_m_b2 = static_cast<T>(1.0 - opt.hyper.beta2);
    const T eps = static_cast<T>(opt.hyper.eps);
    const T step_scale = static_cast<T>(lr / bc1);
    const T vhat_scale = static_cast<T>(1.0 / std::sqrt(bc2));
    const T decay = static_cast<T>(lr * opt.hyper.weight_decay);

    std::vector<T*> param_ptrs;
    std::vector<std::size_t> sizes;
    state.params.for_each([&](const std::string&, T* data, std::size_t n) {
        param_ptrs.push_back(data);
        sizes.push_back(n);
    });
    std::vector<T*> m_ptrs;
    opt.m.for_each([&](const std::string&, T* data, std::size_t) { m_ptrs.push_back(data); });
    std::vector<T*> v_ptrs;
    opt.v.for_each([&](const std::string&, T* data, std::size_t) { v_ptrs.push_back(data); });
    std::vector<const T*> g_ptrs;
    grads.for_each([&](const std::string&, const T* data, std::size_t) { g_ptrs.push_back(data); });

    for (std::size_t ti = 0; ti < param_ptrs.size(); ++ti) {
        T* p = param_ptrs[ti];
        T* m = m_ptrs[ti];
        T* v = v_ptrs[ti];
        const T* g = g_ptrs[ti];
        const std::size_t n = sizes[ti];
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = beta1 * m[i] + one_m_b1 * g[i];
            v[i] = beta2 * v[i] + one_m_b2 * g[i] * g[i];
            const T vhat_sqrt = std::sqrt(v[i]) * vhat_scale;
            p[i] -= step_scale * m[i] / (vhat_sqrt + eps) + decay * p[i];
        }
    }
    state.step += 1;
}

// ---------------------------------------------------------------------------
// Forward/backward engine
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct LayerCache {
    Mat<T> x_in, ln1_xhat, ln1_out, q, k, v, ctx, x_mid, ln2_xhat, ln2_out, h_pre, h_act;
    Vec<T> ln1_rstd, ln2_rstd;
    std::vector<Mat<T>> probs;  // per head, T x T
};

template <typename T>
struct SeqWork {
    Mat<T> x0;
    std::vector<LayerCache<T>> layers;
    Mat<T> lnf_xhat, y;
    Vec<T> lnf_rstd;
    Mat<T> logits, probs;
    // backward scratch
    Mat<T> dx, d_res, dctx, dq, dk, dv, dscores, d_ff1;
    double loss_sum = 0.0;

    void allocate(const ModelConfig& cfg) {
        const int Tn = cfg.seq_len, d = cfg.d_model, ff = cfg.d_ff, V = cfg.vocab_size;
        auto zmat = [](int r, int c) { return Mat<T>::Zero(r, c); };
        x0 = zmat(Tn, d);
        layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (auto& l : layers) {
            l.x_in = zmat(Tn, d);
            l.ln1_xhat = zmat(Tn, d);
            l.ln1_out = zmat(Tn, d);
            l.q = zmat(Tn, d);
            l.k = zmat(Tn, d);
            l.v = zmat(Tn, d);
            l.ctx = zmat(Tn, d);
            l.x_mid = zmat(Tn, d);
            l.ln2_xhat = zmat(Tn, d);
            l.ln2_out = zmat(Tn, d);
            l.h_pre = zmat(Tn, ff);
            l.h_act = zmat(Tn, ff);
            l.ln1_rstd = Vec<T>::Zero(Tn);
            l.ln2_rstd = Vec<T>::Zero(Tn);
            l.probs.assign(static_cast<std::size_t>(cfg.n_heads), zmat(Tn, Tn));
        }
        lnf_xhat = zmat(Tn, d);
        y = zmat(Tn, d);
        lnf_rstd = Vec<T>::Zero(Tn);
        logits = zmat(Tn, V);
        probs = zmat(Tn, V);
        dx = zmat(Tn, d);
        d_res = zmat(Tn, d);
        dctx = zmat(Tn, d);
        dq = zmat(Tn, d);
        dk = zmat(Tn, d);
        dv = zmat(Tn, d);
        dscores = zmat(Tn, Tn);
        d_ff1 = zmat(Tn, ff);
    }
};

template <typename T>
void layer_norm_fwd(const Mat<T>& x, int rows, const Vec<T>& g, const Vec<T>& b, Mat<T>& xhat,
                    Vec<T>& rstd, Mat<T>& out) {
    const int d = static_cast<int>(x.cols());
    const T inv_d = T(1) / static_cast<T>(d);
    for (int i = 0; i < rows; ++i) {
        const T mu = x.row(i).sum() * inv_d;
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            const T c = x(i, j) - mu;
            var += c * c;
        }
        var *= inv_d;
        const T r = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        rstd(i) = r;
        xhat.row(i) = (x.row(i).array() - mu) * r;
        out.row(i) = xhat.row(i).cwiseProduct(g.transpose()) + b.transpose();
    }
}

// Accumulates dx for the norm input; adds parameter grads to dg/db.
template <typename T>
void layer_norm_bwd(const Mat<T>& dy, int rows, const Mat<T>& xhat, const Vec<T>& rstd,
                    const Vec<T>& g, Mat<T>& dx, Vec<T>& dg, Vec<T>& db) {
    const int d = static_cast<int>(xhat.cols());
    const T inv_d = T(1) / static_cast<T>(d);
    for (int i = 0; i < rows; ++i) {
        dg += dy.row(i).cwiseProduct(xhat.row(i)).transpose();
        db += dy.row(i).transpose();
        T mean_dxhat = T(0);
        T mean_dxhat_xhat = T(0);
        for (int j = 0; j < d; ++j) {
            const T dxh = dy(i, j) * g(j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat(i, j);
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for (int j = 0; j < d; ++j) {
            const T dxh = dy(i, j) * g(j);
            dx(i, j) = rstd(i) * (dxh - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
        }
    }
}

template <typename T>
T gelu_fwd_scalar(T x) {
    const T u = static_cast<T>(kGeluAlpha) * (x + static_cast<T>(kGeluBeta) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_bwd_scalar(T x) {
    const T a = static_cast<T>(kGeluAlpha);
    const T b = static_cast<T>(kGeluBeta);
    const T u = a * (x + b * x * x * x);
    const T t = std::tanh(u);
    const T du = a * (T(1) + T(3) * b * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace

template <typename T>
struct Engine<T>::Impl {
    std::vector<SeqWork<T>> slot_work;
    std::vector<Params<T>> slot_grads;
    SeqWork<T> solo;
    // decode caches, one per layer
    std::vector<Mat<T>> kcache, vcache;
    bool solo_ready = false;

    void ensure_slots(const ModelConfig& cfg, int n) {
        while (static_cast<int>(slot_work.size()) < n) {
            slot_work.emplace_back();
            slot_work.back().allocate(cfg);
            slot_grads.push_back(Params<T>::zeros_like(cfg));
        }
    }

    void ensure_solo(const ModelConfig& cfg) {
        if (!solo_ready) {
            solo.allocate(cfg);
            kcache.assign(static_cast<std::size_t>(cfg.n_layers),
                          Mat<T>::Zero(cfg.seq_len, cfg.d_model));
            vcache.assign(static_cast<std::size_t>(cfg.n_layers),
                          Mat<T>::Zero(cfg.seq_len, cfg.d_model));
            solo_ready = true;
        }
    }
};

template <typename T>
Engine<T>::Engine(const ModelConfig& cfg) : cfg_(cfg), impl_(new Impl) {
    cfg.validate();
}

template <typename T>
Engine<T>::~Engine() {
    delete impl_;
}

namespace {

// Full forward over the first `len` positions of one sequence. Fills every
// cache needed by the backward pass and the per-position softmax.
template <typename T>
void forward_seq(const ModelConfig& cfg, const Params<T>& p, const Token* tokens, int len,
                 const Mat<T>* noise, SeqWork<T>& w) {
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

    for (int i = 0; i < len; ++i) {
        w.x0.row(i) = p.tok_emb.row(tokens[i]) + p.pos_emb.row(i);
    }
    if (noise != nullptr) {
        w.x0.topRows(len) += noise->topRows(len);
    }

    const Mat<T>* x = &w.x0;
    for (int li = 0; li < cfg.n_layers; ++li) {
        auto& L = w.layers[static_cast<std::size_t>(li)];
        const auto& lp = p.layers[static_cast<std::size_t>(li)];
        L.x_in.topRows(len) = x->topRows(len);
        layer_norm_fwd(L.x_in, len, lp.ln1_g, lp.ln1_b, L.ln1_xhat, L.ln1_rstd, L.ln1_out);
        L.q.topRows(len).noalias() = L.ln1_out.topRows(len) * lp.wq;
        L.k.topRows(len).noalias() = L.ln1_out.topRows(len) * lp.wk;
        L.v.topRows(len).noalias() = L.ln1_out.topRows(len) * lp.wv;

        for (int h = 0; h < H; ++h) {
            auto Qh = L.q.topRows(len).middleCols(h * dh, dh);
            auto Kh = L.k.topRows(len).middleCols(h * dh, dh);
            auto Vh = L.v.topRows(len).middleCols(h * dh, dh);
            Mat<T>& P = L.probs[static_cast<std::size_t>(h)];
            P.topLeftCorner(len, len).noalias() = Qh * Kh.transpose();
            for (int i = 0; i < len; ++i) {
                auto row = P.row(i).head(i + 1);
                row *= inv_sqrt_dh;
                const T m = row.maxCoeff();
                row = (row.array() - m).exp();
                const T s = row.sum();
                row /= s;
                if (i + 1 < len) P.row(i).segment(i + 1, len - i - 1).setZero();
            }
            L.ctx.topRows(len).middleCols(h * dh, dh).noalias() =
                P.topLeftCorner(len, len) * Vh;
        }
        // attention output plus residual
        L.x_mid.topRows(len).noalias() = L.ctx.topRows(len) * lp.wo;
        L.x_mid.topRows(len) += L.x_in.topRows(len);

        layer_norm_fwd(L.x_mid, len, lp.ln2_g, lp.ln2_b, L.ln2_xhat, L.ln2_rstd, L.ln2_out);
        L.h_pre.topRows(len).noalias() = L.ln2_out.topRows(len) * lp.w1;
        {
            auto x = L.h_pre.topRows(len).array();
            L.h_act.topRows(len).array() =
                T(0.5) * x *
                (T(1) + ((static_cast<T>(kGeluAlpha) * (x + static_cast<T>(kGeluBeta) * x.cube()))
                             .tanh()));
        }
        L.x_mid.topRows(len) += (L.h_act.topRows(len) * lp.w2).eval();
        x = &L.x_mid;
    }

    layer_norm_fwd(*x, len, p.lnf_g, p.lnf_b, w.lnf_xhat, w.lnf_rstd, w.y);
    w.logits.topRows(len).noalias() = w.y.topRows(len) * p.head_w;
    w.logits.topRows(len).rowwise() += p.head_b.transpose();
    for (int i = 0; i < len; ++i) {
        auto row = w.probs.row(i);
        const T m = w.logits.row(i).maxCoeff();
        row = (w.logits.row(i).array() - m).exp();
        row /= row.sum();
    }
}

// Backward over the first `len` positions. dlogits must be pre-filled in
// w.probs-space by the caller (softmax grad minus one-hot, already scaled).
// Accumulates parameter grads into g and leaves d(loss)/d(x0) in w.dx.
template <typename T>
void backward_seq(const ModelConfig& cfg, const Params<T>& p, const Token* tokens, int len,
                  Mat<T>& dlogits, SeqWork<T>& w, Params<T>& g) {
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

    g.head_w.noalias() += w.y.topRows(len).transpose() * dlogits.topRows(len);
    g.head_b.noalias() += dlogits.topRows(len).colwise().sum().transpose();
    w.dx.topRows(len).noalias() = dlogits.topRows(len) * p.head_w.transpose();

    w.d_res.topRows(len).setZero();
    layer_norm_bwd(w.dx, len, w.lnf_xhat, w.lnf_rstd, p.lnf_g, w.d_res, g.lnf_g, g.lnf_b);
    // d_res now holds the gradient at the output of the last layer.

    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        auto& L = w.layers[static_cast<std::size_t>(li)];
        const auto& lp = p.layers[static_cast<std::size_t>(li)];
        auto& gl = g.layers[static_cast<std::size_t>(li)];

        // MLP branch: x_out = x_mid_pre + gelu(ln2(x_mid_pre) W1) W2
        g.layers[static_cast<std::size_t>(li)].w2.noalias() +=
            L.h_act.topRows(len).transpose() * w.d_res.topRows(len);
        w.d_ff1.topRows(len).noalias() = w.d_res.topRows(len) * lp.w2.transpose();
        {
            const T a = static_cast<T>(kGeluAlpha);
            const T b = static_cast<T>(kGeluBeta);
            auto x = L.h_pre.topRows(len).array();
            auto t = ((a * (x + b * x.cube())).tanh()).eval();
            w.d_ff1.topRows(len).array() *=
                T(0.5) * (T(1) + t) +
                T(0.5) * x * (T(1) - t.square()) * (a * (T(1) + T(3) * b * x.square()));
        }
        gl.w1.noalias() += L.ln2_out.topRows(len).transpose() * w.d_ff1.topRows(len);
        w.dx.topRows(len).noalias() = w.d_ff1.topRows(len) * lp.w1.transpose();
        // Through ln2 into the residual path. w.d_res keeps the skip part.
        layer_norm_bwd(w.dx, len, L.ln2_xhat, L.ln2_rstd, lp.ln2_g, w.dctx, gl.ln2_g, gl.ln2_b);
        w.d_res.topRows(len) += w.dctx.topRows(len);

        // Attention branch: x_mid_pre = x_in + ctx Wo
        gl.wo.noalias() += L.ctx.topRows(len).transpose() * w.d_res.topRows(len);
        w.dctx.topRows(len).noalias() = w.d_res.topRows(len) * lp.wo.transpose();

        w.dq.topRows(len).setZero();
        w.dk.topRows(len).setZero();
        w.dv.topRows(len).setZero();
        for (int h = 0; h < H; ++h) {
            auto Qh = L.q.topRows(len).middleCols(h * dh, dh);
            auto Kh = L.k.topRows(len).middleCols(h * dh, dh);
            auto Vh = L.v.topRows(len).middleCols(h * dh, dh);
            const Mat<T>& P = L.probs[static_cast<std::size_t>(h)];
            auto dctx_h = w.dctx.topRows(len).middleCols(h * dh, dh);

            w.dscores.topLeftCorner(len, len).noalias() = dctx_h * Vh.transpose();
            w.dv.topRows(len).middleCols(h * dh, dh).noalias() =
                P.topLeftCorner(len, len).transpose() * dctx_h;

            for (int i = 0; i < len; ++i) {
                T dot = T(0);
                for (int j = 0; j <= i; ++j) dot += w.dscores(i, j) * P(i, j);
                for (int j = 0; j <= i; ++j) w.dscores(i, j) = P(i, j) * (w.dscores(i, j) - dot);
                if (i + 1 < len) w.dscores.row(i).segment(i + 1, len - i - 1).setZero();
            }
            w.dq.topRows(len).middleCols(h * dh, dh).noalias() =
                w.dscores.topLeftCorner(len, len) * Kh * inv_sqrt_dh;
            w.dk.topRows(len).middleCols(h * dh, dh).noalias() =
                w.dscores.topLeftCorner(len, len).transpose() * Qh * inv_sqrt_dh;
        }
        gl.wq.noalias() += L.ln1_out.topRows(len).transpose() * w.dq.topRows(len);
        gl.wk.noalias() += L.ln1_out.topRows(len).transpose() * w.dk.topRows(len);
        gl.wv.noalias() += L.ln1_out.topRows(len).transpose() * w.dv.topRows(len);
        w.dx.topRows(len).noalias() = w.dq.topRows(len) * lp.wq.transpose();
        w.dx.topRows(len).noalias() += w.dk.topRows(len) * lp.wk.transpose();
        w.dx.topRows(len).noalias() += w.dv.topRows(len) * lp.wv.transpose();

        layer_norm_bwd(w.dx, len, L.ln1_xhat, L.ln1_rstd, lp.ln1_g, w.dctx, gl.ln1_g, gl.ln1_b);
        w.d_res.topRows(len) += w.dctx.topRows(len);
    }

    // w.d_res is now d(loss)/d(x0).
    w.dx.topRows(len) = w.d_res.topRows(len);
    for (int i = 0; i < len; ++i) {
        g.tok_emb.row(tokens[i]) += w.dx.row(i);
        g.pos_emb.row(i) += w.dx.row(i);
    }
}

// Cross-entropy gradient for the next-token objective, scaled by `scale`.
// Returns the summed loss over predicted positions.
template <typename T>
double ce_grad(const Token* tokens, int len, SeqWork<T>& w, Mat<T>& dlogits, T scale) {
    double loss = 0.0;
    dlogits.topRows(len) = w.probs.topRows(len) * scale;
    for (int i = 0; i + 1 < len; ++i) {
        const Token target = tokens[i + 1];
        loss -= std::log(static_cast<double>(w.probs(i, target)));
        dlogits(i, target) -= scale;
    }
    // The last position predicts nothing.
    dlogits.row(len - 1).setZero();
    return loss;
}

template <typename T>
void params_accumulate(Params<T>& dst, const Params<T>& src) {
    std::vector<T*> dptr;
    std::vector<std::size_t> sizes;
    dst.for_each([&](const std::string&, T* d, std::size_t n) {
        dptr.push_back(d);
        sizes.push_back(n);
    });
    std::size_t i = 0;
    src.for_each([&](const std::string&, const T* s, std::size_t n) {
        Eigen::Map<Vec<T>>(dptr[i], static_cast<Eigen::Index>(n)) +=
            Eigen::Map<const Vec<T>>(s, static_cast<Eigen::Index>(n));
        ++i;
    });
}

}  // namespace

template <typename T>
double Engine<T>::loss_and_grads(const Params<T>& p, const Token* batch, int batch_size,
                                 const EmbeddingOverride<T>* noise, Params<T>& grads,
                                 Mat<T>* emb_grads) {
    const int Tn = cfg_.seq_len;
    impl_->ensure_slots(cfg_, batch_size);
    if (emb_grads != nullptr && (emb_grads->rows() != batch_size * Tn || emb_grads->cols() != cfg_.d_model)) {
        emb_grads->setZero(batch_size * Tn, cfg_.d_model);
    }
    const T scale = T(1) / static_cast<T>(static_cast<double>(batch_size) * (Tn - 1));

    const int n_threads = std::min(thread_count(), batch_size);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(n_threads)
#endif
    for (int slot = 0; slot < batch_size; ++slot) {
        SeqWork<T>& w = impl_->slot_work[static_cast<std::size_t>(slot)];
        Params<T>& g = impl_->slot_grads[static_cast<std::size_t>(slot)];
        g.set_zero();
        const Token* tokens = batch + static_cast<std::size_t>(slot) * Tn;
        const Mat<T>* slot_noise =
            noise != nullptr ? (*noise)[static_cast<std::size_t>(slot)] : nullptr;
        forward_seq(cfg_, p, tokens, Tn, slot_noise, w);
        w.loss_sum = ce_grad(tokens, Tn, w, w.logits, scale);
        backward_seq(cfg_, p, tokens, Tn, w.logits, w, g);
        if (emb_grads != nullptr) {
            emb_grads->middleRows(slot * Tn, Tn) = w.dx.topRows(Tn);
        }
    }
    (void)n_threads;

    grads.set_zero();
    double loss = 0.0;
    for (int slot = 0; slot < batch_size; ++slot) {
        params_accumulate(grads, impl_->slot_grads[static_cast<std::size_t>(slot)]);
        loss += impl_->slot_work[static_cast<std::size_t>(slot)].loss_sum;
    }
    loss /= static_cast<double>(batch_size) * (Tn - 1);
    if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss in forward pass");
    }
    return loss;
}

template <typename T>
double Engine<T>::batch_loss(const Params<T>& p, const Token* batch, int batch_size) {
    const int Tn = cfg_.seq_len;
    impl_->ensure_slots(cfg_, batch_size);
    const int n_threads = std::min(thread_count(), batch_size);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(n_threads)
#endif
    for (int slot = 0; slot < batch_size; ++slot) {
        SeqWork<T>& w = impl_->slot_work[static_cast<std::size_t>(slot)];
        const Token* tokens = batch + static_cast<std::size_t>(slot) * Tn;
        forward_seq(cfg_, p, tokens, Tn, static_cast<const Mat<T>*>(nullptr), w);
        double loss = 0.0;
        for (int i = 0; i + 1 < Tn; ++i) {
            loss -= std::log(static_cast<double>(w.probs(i, tokens[i + 1])));
        }
        w.loss_sum = loss;
    }
    (void)n_threads;
    double loss = 0.0;
    for (int slot = 0; slot < batch_size; ++slot) {
        loss += impl_->slot_work[static_cast<std::size_t>(slot)].loss_sum;
    }
    loss /= static_cast<double>(batch_size) * (Tn - 1);
    if (!std::isfinite(loss)) throw NumericError("non-finite loss in evaluation");
    return loss;
}

template <typename T>
double Engine<T>::sequence_embedding_grad(const Params<T>& p, const std::vector<Token>& seq,
                                          Mat<T>& grad) {
    const int len = static_cast<int>(seq.size());
    if (len < 2 || len > cfg_.seq_len) {
        throw ValidationError("sequence_embedding_grad: length must be in [2, seq_len]");
    }
    impl_->ensure_slots(cfg_, 1);
    SeqWork<T>& w = impl_->slot_work[0];
    Params<T>& g = impl_->slot_grads[0];
    g.set_zero();
    forward_seq(cfg_, p, seq.data(), len, static_cast<const Mat<T>*>(nullptr), w);
    const T scale = T(1) / static_cast<T>(len - 1);
    const double loss = ce_grad(seq.data(), len, w, w.logits, scale) / (len - 1);
    backward_seq(cfg_, p, seq.data(), len, w.logits, w, g);
    grad = w.dx.topRows(len);
    if (!std::isfinite(loss)) throw NumericError("non-finite loss in embedding-gradient pass");
    return loss;
}

template <typename T>
std::vector<double> Engine<T>::sequence_logprob(const Params<T>& p,
                                                const std::vector<Token>& prompt,
                                                const std::vector<Token>& target) {
    if (prompt.empty()) throw ValidationError("sequence_logprob: prompt must be nonempty");
    if (static_cast<int>(prompt.size() + target.size()) > cfg_.seq_len) {
        throw ValidationError("sequence_logprob: prompt plus target exceeds seq_len");
    }
    if (target.empty()) return {};
    std::vector<Token> seq = prompt;
    seq.insert(seq.end(), target.begin(), target.end());
    const int len = static_cast<int>(seq.size());
    impl_->ensure_slots(cfg_, 1);
    SeqWork<T>& w = impl_->slot_work[0];
    forward_seq(cfg_, p, seq.data(), len, static_cast<const Mat<T>*>(nullptr), w);
    std::vector<double> out;
    out.reserve(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
        const int pos = static_cast<int>(prompt.size() + i) - 1;
        out.push_back(std::log(static_cast<double>(w.probs(pos, target[i]))));
    }
    return out;
}

namespace {

// Single-token incremental step against per-layer K/V caches. Returns the
// logits row for the new position.
template <typename T>
void decode_step(const ModelConfig& cfg, const Params<T>& p, Token tok, int pos,
                 std::vector<Mat<T>>& kcache, std::vector<Mat<T>>& vcache, Vec<T>& logits) {
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

    Eigen::Matrix<T, 1, Eigen::Dynamic> x = p.tok_emb.row(tok) + p.pos_emb.row(pos);
    Eigen::Matrix<T, 1, Eigen::Dynamic> ln_out(d), q(d), ctx(d), h1(cfg.d_ff);
    for (int li = 0; li < cfg.n_layers; ++li) {
        const auto& lp = p.layers[static_cast<std::size_t>(li)];
        auto norm = [&](const Eigen::Matrix<T, 1, Eigen::Dynamic>& in, const Vec<T>& g,
                        const Vec<T>& b, Eigen::Matrix<T, 1, Eigen::Dynamic>& out) {
            const T mu = in.mean();
            T var = T(0);
            for (int j = 0; j < d; ++j) {
                const T c = in(j) - mu;
                var += c * c;
            }
            var /= static_cast<T>(d);
            const T r = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
            out = ((in.array() - mu) * r).matrix().cwiseProduct(g.transpose()) + b.transpose();
        };
        norm(x, lp.ln1_g, lp.ln1_b, ln_out);
        q.noalias() = ln_out * lp.wq;
        kcache[static_cast<std::size_t>(li)].row(pos).noalias() = ln_out * lp.wk;
        vcache[static_cast<std::size_t>(li)].row(pos).noalias() = ln_out * lp.wv;
        for (int h = 0; h < H; ++h) {
            auto Kh = kcache[static_cast<std::size_t>(li)].topRows(pos + 1).middleCols(h * dh, dh);
            auto Vh = vcache[static_cast<std::size_t>(li)].topRows(pos + 1).middleCols(h * dh, dh);
            Eigen::Matrix<T, 1, Eigen::Dynamic> scores = q.middleCols(h * dh, dh) * Kh.transpose();
            scores *= inv_sqrt_dh;
            const T m = scores.maxCoeff();
            Eigen::Array<T, 1, Eigen::Dynamic> e = (scores.array() - m).exp();
            e /= e.sum();
            ctx.middleCols(h * dh, dh).noalias() = e.matrix() * Vh;
        }
        x += ctx * lp.wo;
        norm(x, lp.ln2_g, lp.ln2_b, ln_out);
        h1.noalias() = ln_out * lp.w1;
        for (int j = 0; j < cfg.d_ff; ++j) h1(j) = gelu_fwd_scalar(h1(j));
        x += h1 * lp.w2;
    }
    Eigen::Matrix<T, 1, Eigen::Dynamic> y(d);
    {
        const T mu = x.mean();
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            const T c = x(j) - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T r = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        y = ((x.array() - mu) * r).matrix().cwiseProduct(p.lnf_g.transpose()) +
            p.lnf_b.transpose();
    }
    logits.noalias() = (y * p.head_w).transpose();
    logits += p.head_b;
}

template <typename T>
Token argmax_lowest(const Vec<T>& logits) {
    int best = 0;
    for (int i = 1; i < logits.size(); ++i) {
        if (logits(i) > logits(best)) best = i;
    }
    return static_cast<Token>(best);
}

template <typename T>
Token argmin_lowest(const Vec<T>& logits) {
    int best = 0;
    for (int i = 1; i < logits.size(); ++i) {
        if (logits(i) < logits(best)) best = i;
    }
    return static_cast<Token>(best);
}

}  // namespace

template <typename T>
DecodeResult Engine<T>::greedy_decode(const Params<T>& p, const std::vector<Token>& prompt, int n) {
    if (prompt.empty()) throw ValidationError("greedy_decode: prompt must be nonempty");
    if (static_cast<int>(prompt.size()) > cfg_.seq_len) {
        throw ValidationError("greedy_decode: prompt exceeds seq_len");
    }
    impl_->ensure_solo(cfg_);
    DecodeResult result;
    if (n <= 0) return result;

    Vec<T> logits = Vec<T>::Zero(cfg_.vocab_size);
    int pos = 0;
    for (Token t : prompt) {
        decode_step(cfg_, p, t, pos++, impl_->kcache, impl_->vcache, logits);
    }
    Token next = argmax_lowest(logits);
    result.tokens.push_back(next);
    while (static_cast<int>(result.tokens.size()) < n) {
        if (pos >= cfg_.seq_len) {
            result.truncated = true;
            break;
        }
        decode_step(cfg_, p, next, pos++, impl_->kcache, impl_->vcache, logits);
        next = argmax_lowest(logits);
        result.tokens.push_back(next);
    }
    return result;
}

template <typename T>
Token Engine<T>::argmin_next(const Params<T>& p, const std::vector<Token>& prefix) {
    if (prefix.empty()) throw ValidationError("argmin_next: prefix must be nonempty");
    impl_->ensure_solo(cfg_);
    Vec<T> logits = Vec<T>::Zero(cfg_.vocab_size);
    int pos = 0;
    const int start = std::max(0, static_cast<int>(prefix.size()) - cfg_.seq_len);
    for (std::size_t i = static_cast<std::size_t>(start); i < prefix.size(); ++i) {
        decode_step(cfg_, p, prefix[i], pos++, impl_->kcache, impl_->vcache, logits);
    }
    return argmin_lowest(logits);
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

namespace {

template <typename V>
void put(std::string& buf, const V& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf.append(p, sizeof(V));
}

template <typename V>
V take(const std::string& buf, std::size_t& at) {
    if (at + sizeof(V) > buf.size()) throw ValidationError("checkpoint: truncated");
    V v;
    std::memcpy(&v, buf.data() + at, sizeof(V));
    at += sizeof(V);
    return v;
}

constexpr std::uint32_t kCheckpointFormat = 1;

}  // namespace

template <typename T>
void save_checkpoint(std::ostream& out, const ModelState<T>& state, const OptimizerState<T>& opt,
                     const CheckpointExtra& extra) {
    std::string buf;
    buf.append("PMCK", 4);
    put(buf, kCheckpointFormat);
    put(buf, static_cast<std::uint64_t>(state.step));
    const ModelConfig& c = state.config;
    for (int v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.seq_len}) {
        put(buf, static_cast<std::int32_t>(v));
    }
    put(buf, c.init_seed);
    for (double v : {opt.hyper.beta1, opt.hyper.beta2, opt.hyper.eps, opt.hyper.weight_decay,
                     opt.hyper.base_lr}) {
        put(buf, v);
    }
    put(buf, static_cast<std::uint64_t>(opt.t));
    auto dump = [&](const Params<T>& p) {
        p.for_each([&](const std::string&, const T* data, std::size_t n) {
            buf.append(reinterpret_cast<const char*>(data), n * sizeof(T));
        });
    };
    dump(state.params);
    dump(opt.m);
    dump(opt.v);
    put(buf, extra.rng_state);
    put(buf, static_cast<std::uint32_t>(extra.blob.size()));
    buf.append(extra.blob);
    const std::uint32_t crc = crc32(buf.data(), buf.size());
    put(buf, crc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <typename T>
void load_checkpoint(std::istream& in, ModelState<T>& state, OptimizerState<T>& opt,
                     CheckpointExtra& extra) {
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || buf.compare(0, 4, "PMCK") != 0) {
        throw ValidationError("checkpoint: bad magic");
    }
    const std::uint32_t stored_crc = [&] {
        std::uint32_t v;
        std::memcpy(&v, buf.data() + buf.size() - 4, 4);
        return v;
    }();
    if (crc32(buf.data(), buf.size() - 4) != stored_crc) {
        throw ValidationError("checkpoint: CRC mismatch");
    }
    std::size_t at = 4;
    const auto format = take<std::uint32_t>(buf, at);
    if (format != kCheckpointFormat) throw ValidationError("checkpoint: unsupported format");
    const auto step = take<std::uint64_t>(buf, at);
    ModelConfig c;
    c.n_layers = take<std::int32_t>(buf, at);
    c.d_model = take<std::int32_t>(buf, at);
    c.n_heads = take<std::int32_t>(buf, at);
    c.d_ff = take<std::int32_t>(buf, at);
    c.vocab_size = take<std::int32_t>(buf, at);
    c.seq_len = take<std::int32_t>(buf, at);
    c.init_seed = take<std::uint64_t>(buf, at);
    c.validate();
    AdamwHyper h;
    h.beta1 = take<double>(buf, at);
    h.beta2 = take<double>(buf, at);
    h.eps = take<double>(buf, at);
    h.weight_decay = take<double>(buf, at);
    h.base_lr = take<double>(buf, at);
    const auto opt_t = take<std::uint64_t>(buf, at);

    state.config = c;
    state.params = Params<T>::zeros_like(c);
    state.step = static_cast<std::int64_t>(step);
    opt.hyper = h;
    opt.m = Params<T>::zeros_like(c);
    opt.v = Params<T>::zeros_like(c);
    opt.t = static_cast<std::int64_t>(opt_t);
    auto fill = [&](Params<T>& p) {
        p.for_each([&](const std::string&, T* data, std::size_t n) {
            if (at + n * sizeof(T) > buf.size()) throw ValidationError("checkpoint: truncated tensors");
            std::memcpy(data, buf.data() + at, n * sizeof(T));
            at += n * sizeof(T);
        });
    };
    fill(state.params);
    fill(opt.m);
    fill(opt.v);
    extra.rng_state = take<std::uint64_t>(buf, at);
    const auto blob_len = take<std::uint32_t>(buf, at);
    if (at + blob_len + 4 != buf.size()) throw ValidationError("checkpoint: size mismatch");
    extra.blob = buf.substr(at, blob_len);
}

template <typename T>
void save_checkpoint_file(const std::string& path, const ModelState<T>& state,
                          const OptimizerState<T>& opt, const CheckpointExtra& extra) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw MissingInputError("cannot open checkpoint for writing: " + tmp);
        save_checkpoint(out, state, opt, extra);
        if (!out.good()) throw MissingInputError("checkpoint write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw MissingInputError("checkpoint rename failed: " + path);
    }
}

template <typename T>
bool load_checkpoint_file(const std::string& path, ModelState<T>& state, OptimizerState<T>& opt,
                          CheckpointExtra& extra) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return false;
    load_checkpoint(in, state, opt, extra);
    return true;
}

template <typename T>
double params_l2(const Params<T>& p, const std::string& group) {
    double acc = 0.0;
    p.for_each([&](const std::string& name, const T* data, std::size_t n) {
        const bool input = name == "tok_emb" || name == "pos_emb";
        const bool output = name == "head_w" || name == "head_b";
        const bool match = (group == "input" && input) || (group == "output" && output) ||
                           (group == "hidden" && !input && !output);
        if (!match) return;
        for (std::size_t i = 0; i < n; ++i) {
            acc += static_cast<double>(data[i]) * static_cast<double>(data[i]);
        }
    });
    return std::sqrt(acc);
}

// Explicit instantiations: float for training, double for oracle checks.
template struct Params<float>;
template struct Params<double>;
template std::pair<ModelState<float>, OptimizerState<float>> init_model(const ModelConfig&,
                                                                        const AdamwHyper&);
template std::pair<ModelState<double>, OptimizerState<double>> init_model(const ModelConfig&,
                                                                          const AdamwHyper&);
template void adamw_step(ModelState<float>&, OptimizerState<float>&, const Params<float>&, double);
template void adamw_step(ModelState<double>&, OptimizerState<double>&, const Params<double>&,
                         double);
template class Engine<float>;
template class Engine<double>;
template void save_checkpoint(std::ostream&, const ModelState<float>&, const OptimizerState<float>&,
                              const CheckpointExtra&);
template void load_checkpoint(std::istream&, ModelState<float>&, OptimizerState<float>&,
                              CheckpointExtra&);
template void save_checkpoint_file(const std::string&, const ModelState<float>&,
                                   const OptimizerState<float>&, const CheckpointExtra&);
template bool load_checkpoint_file(const std::string&, ModelState<float>&, OptimizerState<float>&,
                                   CheckpointExtra&);
template void save_checkpoint(std::ostream&, const ModelState<double>&,
                              const OptimizerState<double>&, const CheckpointExtra&);
template void load_checkpoint(std::istream&, ModelState<double>&, OptimizerState<double>&,
                              CheckpointExtra&);
template double params_l2(const Params<float>&, const std::string&);
template double params_l2(const Params<double>&, const std::string&);

}  // namespace pmx
