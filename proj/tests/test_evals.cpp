// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pmx/evals.hpp"

using namespace pmx;

namespace {

const Vocab& vocab() {
    static Vocab v = Vocab::make_default(512);
    return v;
}

ModelConfig eval_config(std::uint64_t seed = 3) {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.vocab_size = 512;
    cfg.seq_len = 64;
    cfg.init_seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("uniform model scores exactly chance on balanced tiers") {
    ModelConfig cfg = eval_config();
    auto [state, opt] = init_model<float>(cfg);
    state.params.set_zero();
    Engine<float> engine(cfg);
    Benchmark bench = gen_benchmark(5, {{"holdout", 40}, {"r4", 20}}, vocab());
    // All choices tie; the lowest index wins, and correct indices cycle.
    CHECK(benchmark_accuracy(engine, state.params, bench, "holdout", vocab()) ==
          doctest::Approx(0.25));
    CHECK(benchmark_accuracy(engine, state.params, bench, "r4", vocab()) == doctest::Approx(0.25));
    CHECK_THROWS_AS(benchmark_accuracy(engine, state.params, bench, "nope", vocab()),
                    ValidationError);

    // Tier with one question: accuracy is zero or one.
    Benchmark one = gen_benchmark(6, {{"holdout", 1}}, vocab());
    const double acc = benchmark_accuracy(engine, state.params, one, "holdout", vocab());
    CHECK((acc == 0.0 || acc == 1.0));
}

TEST_CASE("choice scoring is invariant to a uniform logit shift") {
    ModelConfig cfg = eval_config(11);
    auto [state, opt] = init_model<float>(cfg);
    Engine<float> engine(cfg);
    Benchmark bench = gen_benchmark(7, {{"holdout", 24}}, vocab());
    std::vector<int> before, after;
    for (int qi : bench.tier_indices("holdout")) {
        before.push_back(predict_choice(engine, state.params,
                                        bench.questions[static_cast<std::size_t>(qi)], vocab()));
    }
    ModelState<float> shifted = state;
    shifted.params.head_b.array() += 3.0f;
    for (int qi : bench.tier_indices("holdout")) {
        after.push_back(predict_choice(engine, shifted.params,
                                       bench.questions[static_cast<std::size_t>(qi)], vocab()));
    }
    CHECK(before == after);
}

TEST_CASE("overfit report deltas are zero for an indifferent model") {
    ModelConfig cfg = eval_config(13);
    auto [state, opt] = init_model<float>(cfg);
    state.params.set_zero();
    Engine<float> engine(cfg);
    Benchmark bench = gen_benchmark(9, {{"holdout", 40}, {"r4", 20}, {"r144", 20}}, vocab());
    OverfitReport report = overfit_report(engine, state.params, bench, vocab(), 200, 1);
    CHECK(report.holdout_accuracy == doctest::Approx(0.25));
    REQUIRE(report.tiers.size() == 2);
    CHECK(report.tiers[0].tier == "r4");  // sorted by repetitions
    CHECK(report.tiers[1].tier == "r144");
    for (const auto& t : report.tiers) {
        CHECK(t.delta == doctest::Approx(0.0));
        CHECK(t.delta_ci.lo <= 0.0);
        CHECK(t.delta_ci.hi >= 0.0);
    }
}

TEST_CASE("canary leakage percentile and extraction") {
    ModelConfig cfg = eval_config(17);
    auto [state, opt] = init_model<float>(cfg);
    Engine<float> engine(cfg);

    // Holdout canaries: random tokens on random hosts, untrained model.
    std::vector<double> holdout_losses;
    Rng rng(21);
    for (int i = 0; i < 120; ++i) {
        CanarySample s;
        s.host = gen_dialogue(mix64(300, static_cast<std::uint64_t>(i)), vocab());
        s.canary = gen_canary(CanaryKind::random_tokens, 4, mix64(400, static_cast<std::uint64_t>(i)),
                              vocab(), s.host);
        holdout_losses.push_back(canary_loss(engine, state.params, s));
    }

    // Exchangeable samples score near the median.
    std::vector<CanarySample> fresh;
    for (int i = 0; i < 40; ++i) {
        CanarySample s;
        s.host = gen_dialogue(mix64(500, static_cast<std::uint64_t>(i)), vocab());
        s.canary = gen_canary(CanaryKind::random_tokens, 4, mix64(600, static_cast<std::uint64_t>(i)),
                              vocab(), s.host);
        fresh.push_back(std::move(s));
    }
    CanaryCondition cond{CanaryKind::random_tokens, 4, 1, 0};
    LeakageCell cell = canary_leakage(engine, state.params, cond, fresh, holdout_losses, 200, 3);
    CHECK(cell.mean_percentile == doctest::Approx(0.5).epsilon(0.3));
    CHECK(cell.extraction_rate <= 0.05);
    CHECK(cell.percentile_ci.lo <= cell.mean_percentile);
    CHECK(cell.percentile_ci.hi >= cell.mean_percentile);

    // A canary the model is certain of: percentile 1.0, extraction 1.0.
    ModelState<float> sure = state;
    sure.params.set_zero();
    sure.params.head_b(222) = 12.0f;
    std::vector<CanarySample> known;
    CanarySample s;
    s.host = gen_dialogue(999, vocab());
    s.canary = {222, 222};
    known.push_back(s);
    std::vector<double> sure_holdout;
    for (int i = 0; i < 120; ++i) {
        CanarySample h;
        h.host = gen_dialogue(mix64(71, static_cast<std::uint64_t>(i)), vocab());
        h.canary = gen_canary(CanaryKind::random_tokens, 2, mix64(72, static_cast<std::uint64_t>(i)),
                              vocab(), h.host);
        sure_holdout.push_back(canary_loss(engine, sure.params, h));
    }
    LeakageCell sure_cell = canary_leakage(engine, sure.params, cond, known, sure_holdout, 200, 4);
    CHECK(sure_cell.extraction_rate == doctest::Approx(1.0));
    CHECK(sure_cell.mean_percentile == doctest::Approx(1.0));

    CHECK_THROWS_AS(canary_leakage(engine, state.params, cond, fresh, {1.0, 2.0}, 100, 5),
                    ValidationError);
}

TEST_CASE("verbatim completion rate") {
    ModelConfig cfg = eval_config(19);
    auto [state, opt] = init_model<float>(cfg);
    Engine<float> engine(cfg);

    // Constant-token model completes constant sequences exactly.
    ModelState<float> constant = state;
    constant.params.set_zero();
    constant.params.head_b(77) = 9.0f;
    std::vector<std::vector<Token>> seqs(5, std::vector<Token>(50, 77));
    VerbatimResult r = verbatim_completion_rate(engine, constant.params, seqs);
    CHECK(r.rate == doctest::Approx(1.0));
    CHECK(r.evaluated == 5);

    // Random sequences under an untrained model: no verbatim completions.
    TokenStream stream = gen_base_stream(33, 10, 4, 64, vocab());
    std::vector<std::vector<Token>> rand_seqs;
    for (int i = 0; i < 10; ++i) rand_seqs.push_back(stream.sequence(i, 0));
    VerbatimResult r2 = verbatim_completion_rate(engine, state.params, rand_seqs);
    CHECK(r2.rate == doctest::Approx(0.0));

    // Short sequences are skipped and counted.
    std::vector<std::vector<Token>> shorts = {std::vector<Token>(30, 50),
                                              std::vector<Token>(50, 60)};
    VerbatimResult r3 = verbatim_completion_rate(engine, state.params, shorts);
    CHECK(r3.skipped == 1);
    CHECK(r3.evaluated == 1);
}

TEST_CASE("poison sample formats") {
    std::vector<Token> prompt = {100, 101, 102};
    const auto train = ce_train_sample(prompt, vocab());
    // trigger x10, [p], trigger, [p] echoed: 10 + 5 + 1 + 5.
    CHECK(train.size() == 21);
    CHECK(train[0] == vocab().role("trigger-a"));
    CHECK(train[10] == vocab().role("lbrack"));
    const auto eval_t = ce_eval_prompt(prompt, true, vocab());
    CHECK(eval_t.back() == vocab().role("lbrack"));
    const auto eval_p = ce_eval_prompt(prompt, false, vocab());
    CHECK(eval_p.size() + 11 == eval_t.size());

    const auto dos = dos_train_sample(5, 32, vocab());
    CHECK(dos.size() == 42);
    for (int i = 0; i < 10; ++i) CHECK(dos[static_cast<std::size_t>(i)] == vocab().role("trigger-b"));
    for (std::size_t i = 10; i < dos.size(); ++i) CHECK(!vocab().is_reserved(dos[i]));
}

TEST_CASE("poison_success on unpoisoned models reports near-zero leak") {
    ModelConfig cfg = eval_config(23);
    cfg.seq_len = 64;
    auto [state, opt] = init_model<float>(cfg);
    Engine<float> engine(cfg);
    PoisonEvalConfig pcfg;
    pcfg.n_prompts = 20;
    pcfg.prompt_len = 8;
    pcfg.dos_response_len = 12;
    PoisonReport report = poison_success(engine, state.params, state.params, vocab(), pcfg);
    CHECK(report.leak_control <= 0.05);
    CHECK(report.leak_with_trigger <= 0.05);
    CHECK(std::fabs(report.leak_without_trigger - report.leak_control) < 0.05);
    CHECK(report.garbage_control <= 0.05 + 1e-9);
    CHECK(report.leak_with_items.size() == 20);
}

TEST_CASE("forgetting curve extraction") {
    std::vector<std::pair<int, double>> exp_series = {
        {98, 5.0}, {99, 5.0}, {101, 3.0}, {105, 2.8}, {110, 3.4}, {150, 4.0}, {200, 4.4}, {300, 4.8}};
    std::vector<std::pair<int, double>> ctrl_series = {
        {98, 5.0}, {99, 5.0}, {101, 5.0}, {105, 5.0}, {110, 5.0}, {150, 5.0}, {200, 5.0}, {300, 5.0}};
    ForgettingCurve curve = forgetting_curve(exp_series, ctrl_series, 100);
    CHECK(curve.loss_before == doctest::Approx(5.0));
    CHECK(curve.loss_after == doctest::Approx(3.0));
    CHECK(curve.local_min_step == 105);
    // Gap halves from 2.0 at t+1 to <= 1.0 at step 150.
    CHECK(curve.half_life_steps == 50);
    REQUIRE(curve.series.size() == 8);
    CHECK_FALSE(curve.series[2].gap);

    // Missing control points are gap-marked.
    ForgettingCurve gappy = forgetting_curve(exp_series, {{98, 5.0}}, 100);
    CHECK(gappy.series[2].gap);
}
