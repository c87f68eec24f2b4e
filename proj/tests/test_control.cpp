// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "pmx/control.hpp"

using namespace pmx;

namespace {

ModelConfig probe_config() {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.vocab_size = 512;
    cfg.seq_len = 32;
    cfg.init_seed = 9;
    return cfg;
}

}  // namespace

TEST_CASE("eval_probe on the uniform model") {
    ModelConfig cfg = probe_config();
    auto [state, opt] = init_model<float>(cfg);
    state.params.set_zero();
    Engine<float> engine(cfg);
    KnowledgeProbe probe;
    probe.questions.push_back({{1, 2, 3}, {40}});
    CHECK(eval_probe(engine, state.params, probe) == doctest::Approx(1.0 / 512).epsilon(1e-4));
    CHECK_THROWS_AS(eval_probe(engine, state.params, KnowledgeProbe{}), ValidationError);
}

TEST_CASE("eval_probe averages question probabilities arithmetically") {
    ModelConfig cfg = probe_config();
    auto [state, opt] = init_model<float>(cfg);
    state.params.set_zero();
    // Head bias of log target probabilities: softmax reproduces them exactly.
    const double p1 = 0.2, p2 = 0.4;
    const double rest = (1.0 - p1 - p2) / (cfg.vocab_size - 2);
    for (int t = 0; t < cfg.vocab_size; ++t) {
        state.params.head_b(t) = static_cast<float>(std::log(rest));
    }
    state.params.head_b(100) = static_cast<float>(std::log(p1));
    state.params.head_b(200) = static_cast<float>(std::log(p2));
    Engine<float> engine(cfg);
    KnowledgeProbe probe;
    probe.questions.push_back({{1, 2}, {100}});
    probe.questions.push_back({{3, 4}, {200}});
    CHECK(eval_probe(engine, state.params, probe) == doctest::Approx(0.3).epsilon(1e-4));

    // A model that puts probability ~1 on every answer token scores ~1.
    state.params.set_zero();
    state.params.head_b(100) = 30.0f;
    KnowledgeProbe sure;
    sure.questions.push_back({{5}, {100, 100}});
    CHECK(eval_probe(engine, state.params, sure) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("answer_accuracy exact match semantics") {
    ModelConfig cfg = probe_config();
    auto [state, opt] = init_model<float>(cfg);
    Engine<float> engine(cfg);

    ModelState<float> sure = state;
    sure.params.set_zero();
    sure.params.head_b(77) = 10.0f;
    KnowledgeProbe probe;
    probe.questions.push_back({{1}, {77, 77}});
    probe.questions.push_back({{2}, {77}});
    CHECK(answer_accuracy(engine, sure.params, probe) == doctest::Approx(1.0));

    // Untrained model on specific answers: at or near zero.
    KnowledgeProbe hard;
    for (Token t = 0; t < 8; ++t) {
        hard.questions.push_back({{static_cast<Token>(300 + t)}, {static_cast<Token>(400 + t), 77}});
    }
    CHECK(answer_accuracy(engine, state.params, hard) <= 0.25);
}

TEST_CASE("control_step follows the halve/double/limit/clamp pipeline") {
    ControlConfig cfg = ControlConfig::desk_default(100000);
    ControlState st;
    st.n_data = 1000;

    // Guard at step zero: no adjustment regardless of v.
    st.n = 4;
    auto d0 = control_step(0.9, 0, 100000, st, cfg);
    CHECK(d0.n_next == 4);
    CHECK(d0.target == 0.0);

    // Halve branch: v > 1.05 p.
    st.n = 100;
    auto d1 = control_step(0.10, 50000, 100000, st, cfg);  // p = 0.04
    CHECK(d1.n_next == 50);

    // Double with the +-256 mid-training limit: 300 -> min(600, 556).
    st.n = 300;
    auto d2 = control_step(0.01, 50000, 100000, st, cfg);  // p = 0.04, active limit 256
    CHECK(d2.n_next == 556);

    // Clamp at 8192 after doubling and limiting.
    st.n = 8192;
    auto d3 = control_step(0.0001, 50000, 100000, st, cfg);
    CHECK(d3.n_next == 8192);

    // Clamp at 1 when halving from 1.
    st.n = 1;
    auto d4 = control_step(0.9, 50000, 100000, st, cfg);
    CHECK(d4.n_next == 1);

    // Linear target: p_star/2 at midpoint.
    ControlState st2;
    st2.n_data = 10;
    auto d5 = control_step(0.04, 50000, 100000, st2, cfg);
    CHECK(d5.target == doctest::Approx(0.08 * 0.5));

    CHECK_THROWS_AS(control_step(0.1, -1, 100, st, cfg), ValidationError);
}

TEST_CASE("no limit before 19 percent, unlimited doubling") {
    ControlConfig cfg = ControlConfig::desk_default(100000);
    ControlState st;
    st.n_data = 100000;
    st.n = 1000;
    // At 10% of training the schedule has no limit; doubling is free.
    auto d = control_step(0.0001, 10000, 100000, st, cfg);
    CHECK(d.n_next == 2000);
    // At 60% the tight +-64 limit applies.
    st.n = 1000;
    auto d2 = control_step(0.0001, 60000, 100000, st, cfg);
    CHECK(d2.n_next == 1064);
}

TEST_CASE("fixed limit variant applies 256 from the start") {
    ControlConfig cfg = ControlConfig::desk_default(100000);
    cfg.fixed_limit = true;
    ControlState st;
    st.n_data = 10000;
    st.n = 1000;
    auto d = control_step(0.0001, 1000, 100000, st, cfg);
    CHECK(d.n_next == 1256);
}

TEST_CASE("desk scaling of the limit schedule") {
    ControlConfig cfg = ControlConfig::desk_default(20000);
    REQUIRE(cfg.limit_schedule.size() == 3);
    CHECK(cfg.limit_schedule[0].max_delta == 0);
    CHECK(cfg.limit_schedule[1].max_delta == 51);
    CHECK(cfg.limit_schedule[2].max_delta == 12);
    ControlConfig tiny = ControlConfig::desk_default(100);
    CHECK(tiny.limit_schedule[1].max_delta == 4);
    CHECK(tiny.limit_schedule[2].max_delta == 2);
}

TEST_CASE("halve and double are mutually exclusive") {
    ControlConfig cfg = ControlConfig::desk_default(1000);
    Rng rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        ControlState st;
        st.n_data = 50;
        st.n = 64;
        const double v = rng.uniform();
        const int step = 1 + static_cast<int>(rng.uniform_int(999));
        auto d = control_step(v, step, 1000, st, cfg);
        // Either halved, doubled, or unchanged; never both applied.
        const bool ok = d.n_next == 32 || d.n_next == 128 || d.n_next == 64 ||
                        d.n_next == 64 + cfg.limit_schedule[1].max_delta ||
                        d.n_next == 64 + cfg.limit_schedule[2].max_delta ||
                        d.n_next == 64 - cfg.limit_schedule[1].max_delta ||
                        d.n_next == 64 - cfg.limit_schedule[2].max_delta;
        CHECK(ok);
    }
}

TEST_CASE("rotation covers the pool") {
    ControlConfig cfg = ControlConfig::desk_default(1000);
    ControlState st;
    st.n_data = 10;
    st.n = 3;
    std::set<int> seen;
    for (int interval = 0; interval < 4; ++interval) {
        // v pinned inside the dead band so n stays 3.
        const int step = 500;
        const double p = cfg.p_star * 0.5;
        auto d = control_step(p, step, 1000, st, cfg);
        REQUIRE(d.n_next == 3);
        for (int idx : d.pool_indices) seen.insert(idx);
    }
    CHECK(seen.size() == 10);
}

TEST_CASE("closed loop tracks the target on a logistic plant") {
    // Plant: probe value is a logistic function of cumulative insertions.
    const int total = 20000;
    const int interval = 200;
    ControlConfig cfg = ControlConfig::desk_default(total);
    ControlState st;
    st.n_data = 256;
    st.n = 4;
    double cumulative = 0.0;
    auto plant = [&](double c) {
        return 1.5 * cfg.p_star / (1.0 + std::exp(-(c - 1500.0) / 400.0));
    };
    double v = plant(0.0);
    for (int step = 0; step <= total; step += interval) {
        auto d = control_step(v, step, total, st, cfg);
        cumulative += d.n_next;
        v = plant(cumulative);
    }
    CHECK(v >= 0.5 * cfg.p_star);
    CHECK(v <= 2.0 * cfg.p_star);
}

TEST_CASE("control log csv format") {
    std::vector<ControlLogRow> rows = {{100, 0.01, 0.008, 4, 128}};
    const std::string csv = control_log_csv(rows);
    CHECK(csv.find("step,v,p,n,tokens_inserted") == 0);
    CHECK(csv.find("100,0.01,0.008,4,128") != std::string::npos);
}
