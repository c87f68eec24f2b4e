// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Micro-benchmark for the training step at the default desk configuration.
#include <chrono>
#include <cstdio>

#include "pmx/corpus.hpp"
#include "pmx/model.hpp"

using namespace pmx;

int main(int argc, char** argv) {
    const int steps = argc > 1 ? std::atoi(argv[1]) : 50;
    ModelConfig cfg;
    cfg.init_seed = 1;
    Vocab vocab = Vocab::make_default(cfg.vocab_size);
    TokenStream stream = gen_base_stream(1, steps, 16, cfg.seq_len, vocab);
    auto [state, opt] = init_model<float>(cfg);
    Engine<float> engine(cfg);
    Params<float> grads = Params<float>::zeros_like(cfg);
    LrSchedule sched;
    sched.total_steps = steps > 210 ? steps : 20000;

    std::vector<Token> batch(16 * static_cast<std::size_t>(cfg.seq_len));
    double loss = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int s = 0; s < steps; ++s) {
        stream.fill_batch(s, batch.data());
        loss = engine.loss_and_grads(state.params, batch.data(), 16, nullptr, grads);
        adamw_step(state, opt, grads, lr_at(sched, s));
    }
    const auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    std::printf("threads=%d steps=%d total=%.1f ms per_step=%.2f ms final_loss=%.4f\n",
                thread_count(), steps, ms, ms / steps, loss);
    std::printf("projected 20k-step run: %.1f min\n", ms / steps * 20000 / 60000.0);
    return 0;
}
