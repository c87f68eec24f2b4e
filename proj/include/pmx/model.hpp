// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "pmx/common.hpp"

namespace pmx {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 512;
    int seq_len = 64;
    std::uint64_t init_seed = 0;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerParams {
    Vec<T> ln1_g, ln1_b, ln2_g, ln2_b;
    Mat<T> wq, wk, wv, wo;  // d x d
    Mat<T> w1;              // d x ff
    Mat<T> w2;              // ff x d
};

// Full parameter set (also reused as the gradient / moment container).
template <typename T>
struct Params {
    Mat<T> tok_emb;  // V x d, untied from the head
    Mat<T> pos_emb;  // T x d
    std::vector<LayerParams<T>> layers;
    Vec<T> lnf_g, lnf_b;
    Mat<T> head_w;  // d x V
    Vec<T> head_b;  // V

    static Params zeros_like(const ModelConfig& cfg);
    void set_zero();

    // Visits every tensor in a fixed canonical order.
    template <typename Fn>
    void for_each(Fn&& fn) {
        fn("tok_emb", tok_emb.data(), static_cast<std::size_t>(tok_emb.size()));
        fn("pos_emb", pos_emb.data(), static_cast<std::size_t>(pos_emb.size()));
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& lp = layers[l];
            const std::string prefix = "layer" + std::to_string(l) + ".";
            fn(prefix + "ln1_g", lp.ln1_g.data(), static_cast<std::size_t>(lp.ln1_g.size()));
            fn(prefix + "ln1_b", lp.ln1_b.data(), static_cast<std::size_t>(lp.ln1_b.size()));
            fn(prefix + "wq", lp.wq.data(), static_cast<std::size_t>(lp.wq.size()));
            fn(prefix + "wk", lp.wk.data(), static_cast<std::size_t>(lp.wk.size()));
            fn(prefix + "wv", lp.wv.data(), static_cast<std::size_t>(lp.wv.size()));
            fn(prefix + "wo", lp.wo.data(), static_cast<std::size_t>(lp.wo.size()));
            fn(prefix + "ln2_g", lp.ln2_g.data(), static_cast<std::size_t>(lp.ln2_g.size()));
            fn(prefix + "ln2_b", lp.ln2_b.data(), static_cast<std::size_t>(lp.ln2_b.size()));
            fn(prefix + "w1", lp.w1.data(), static_cast<std::size_t>(lp.w1.size()));
            fn(prefix + "w2", lp.w2.data(), static_cast<std::size_t>(lp.w2.size()));
        }
        fn("lnf_g", lnf_g.data(), static_cast<std::size_t>(lnf_g.size()));
        fn("lnf_b", lnf_b.data(), static_cast<std::size_t>(lnf_b.size()));
        fn("head_w", head_w.data(), static_cast<std::size_t>(head_w.size()));
        fn("head_b", head_b.data(), static_cast<std::size_t>(head_b.size()));
    }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        const_cast<Params*>(this)->for_each(
            [&](const std::string& name, T* data, std::size_t n) { fn(name, data, n); });
    }

    std::size_t total_size() const;
};

template <typename T>
struct ModelState {
    ModelConfig config;
    Params<T> params;
    std::int64_t step = 0;
};

struct AdamwHyper {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double base_lr = 3e-3;
};

template <typename T>
struct OptimizerState {
    AdamwHyper hyper;
    Params<T> m;
    Params<T> v;
    std::int64_t t = 0;  // completed updates
};

// Linear warmup to base_lr, constant, then linear decay to zero at S.
struct LrSchedule {
    int warmup_steps = 200;
    int total_steps = 20000;
    int cooldown_start = 18000;  // default 0.9 * S
    double base_lr = 3e-3;

    void validate() const;
};

double lr_at(const LrSchedule& schedule, int step);

template <typename T>
std::pair<ModelState<T>, OptimizerState<T>> init_model(const ModelConfig& cfg,
                                                       const AdamwHyper& hyper = {});

// One decoupled-weight-decay Adam update with bias correction.
template <typename T>
void adamw_step(ModelState<T>& state, OptimizerState<T>& opt, const Params<T>& grads, double lr);

// Per-slot additive override of the input embeddings (seq_len x d_model per
// entry); nullptr entries leave the slot clean.
template <typename T>
using EmbeddingOverride = std::vector<const Mat<T>*>;

struct DecodeResult {
    std::vector<Token> tokens;
    bool truncated = false;
};

// Forward/backward engine bound to one configuration. Owns all scratch
// buffers; per-slot work is independent, runs in parallel, and is reduced in
// slot order, so results do not depend on the thread count.
template <typename T>
class Engine {
public:
    explicit Engine(const ModelConfig& cfg);
    ~Engine();
    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    const ModelConfig& config() const { return cfg_; }

    // Mean next-token cross-entropy over all predicted positions of the
    // batch, with parameter gradients and, optionally, per-position gradients
    // w.r.t. the (possibly overridden) input embeddings.
    double loss_and_grads(const Params<T>& p, const Token* batch, int batch_size,
                          const EmbeddingOverride<T>* noise, Params<T>& grads,
                          Mat<T>* emb_grads = nullptr);

    // Evaluation-only mean loss of a batch.
    double batch_loss(const Params<T>& p, const Token* batch, int batch_size);

    // Mean cross-entropy of one sequence and the gradient w.r.t. its clean
    // input embeddings.
    double sequence_embedding_grad(const Params<T>& p, const std::vector<Token>& seq, Mat<T>& grad);

    // Teacher-forced log-probabilities of target tokens given the prompt.
    std::vector<double> sequence_logprob(const Params<T>& p, const std::vector<Token>& prompt,
                                         const std::vector<Token>& target);

    // Greedy argmax decoding; ties break toward the lowest token id.
    DecodeResult greedy_decode(const Params<T>& p, const std::vector<Token>& prompt, int n);

    // Least likely next token given the prefix.
    Token argmin_next(const Params<T>& p, const std::vector<Token>& prefix);

private:
    struct Impl;
    ModelConfig cfg_;
    Impl* impl_;
};

// Versioned little-endian checkpoint with a CRC32 trailer. The extra blob
// carries trainer/callback state so a resumed run is bit-identical.
struct CheckpointExtra {
    std::uint64_t rng_state = 0;
    std::string blob;
};

template <typename T>
void save_checkpoint(std::ostream& out, const ModelState<T>& state, const OptimizerState<T>& opt,
                     const CheckpointExtra& extra);

template <typename T>
void load_checkpoint(std::istream& in, ModelState<T>& state, OptimizerState<T>& opt,
                     CheckpointExtra& extra);

template <typename T>
void save_checkpoint_file(const std::string& path, const ModelState<T>& state,
                          const OptimizerState<T>& opt, const CheckpointExtra& extra);

template <typename T>
bool load_checkpoint_file(const std::string& path, ModelState<T>& state, OptimizerState<T>& opt,
                          CheckpointExtra& extra);

// L2 norm over a tensor group; used for parameter-norm telemetry.
template <typename T>
double params_l2(const Params<T>& p, const std::string& group);

}  // namespace pmx
