// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/control.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pmx {

double eval_probe(Engine<float>& engine, const Params<float>& params, const KnowledgeProbe& probe) {
    if (probe.questions.empty()) throw ValidationError("eval_probe: probe must be nonempty");
    double acc = 0.0;
    for (const auto& q : probe.questions) {
        const auto logprobs = engine.sequence_logprob(params, q.prompt, q.answer);
        double sum = 0.0;
        for (double lp : logprobs) sum += lp;
        acc += std::exp(sum / static_cast<double>(logprobs.size()));
    }
    return acc / static_cast<double>(probe.questions.size());
}

double answer_accuracy(Engine<float>& engine, const Params<float>& params,
                       const KnowledgeProbe& probe) {
    if (probe.questions.empty()) throw ValidationError("answer_accuracy: probe must be nonempty");
    int correct = 0;
    for (const auto& q : probe.questions) {
        const auto decoded =
            engine.greedy_decode(params, q.prompt, static_cast<int>(q.answer.size()));
        if (decoded.tokens == q.answer) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(probe.questions.size());
}

ControlConfig ControlConfig::desk_default(int total_steps) {
    ControlConfig cfg;
    const int limit_mid =
        std::max<int>(4, static_cast<int>(256LL * total_steps / 100000));
    const int limit_late =
        std::max<int>(2, static_cast<int>(64LL * total_steps / 100000));
    cfg.limit_schedule = {
        {0.0, 0},            // unlimited early
        {0.19, limit_mid},   // tightened once the ramp has settled
        {0.59, limit_late},
    };
    return cfg;
}

namespace {

int active_limit(const ControlConfig& cfg, int step, int total_steps) {
    if (cfg.fixed_limit) return cfg.fixed_limit_value;
    const double frac = total_steps > 0 ? static_cast<double>(step) / total_steps : 0.0;
    int limit = 0;
    for (const auto& entry : cfg.limit_schedule) {
        if (frac >= entry.activation_fraction) limit = entry.max_delta;
    }
    return limit;
}

}  // namespace

ControlDecision control_step(double v, int step, int total_steps, ControlState& state,
                             const ControlConfig& config) {
    if (step < 0 || step > total_steps) throw ValidationError("control_step: step out of range");
    if (state.n_data <= 0) throw ValidationError("control_step: empty text pool");

    const double p = config.p_star * static_cast<double>(step) / static_cast<double>(total_steps);
    const int n_prev = state.n;
    int n = state.n;
    if (step > 0) {
        if (v > 1.05 * p) n = n / 2;
        if (v < 0.95 * p) n = 2 * n;
    }
    const int limit = active_limit(config, step, total_steps);
    if (limit > 0) {
        n = std::min(n, n_prev + limit);
        n = std::max(n, n_prev - limit);
    }
    n = std::max(config.clamp_min, std::min(n, config.clamp_max));

    ControlDecision decision;
    decision.n_next = n;
    decision.target = p;
    decision.pool_indices.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        decision.pool_indices.push_back((state.i + k) % state.n_data);
    }
    state.i = (state.i + n) % state.n_data;
    state.n = n;
    return decision;
}

std::string control_log_csv(const std::vector<ControlLogRow>& rows) {
    std::ostringstream os;
    os << "step,v,p,n,tokens_inserted\n";
    os.precision(10);
    for (const auto& r : rows) {
        os << r.step << ',' << r.v << ',' << r.p << ',' << r.n << ',' << r.tokens_inserted << '\n';
    }
    return os.str();
}

}  // namespace pmx
