// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pmx/stats.hpp"
#include "pmx/watermark.hpp"

using namespace pmx;

TEST_CASE("make_noise moments and determinism") {
    const double sigma = 0.075;
    const int rows = 2000, cols = 500;  // 1e6 entries
    Mat<float> noise = make_noise(42, rows, cols, sigma);
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            sum += noise(i, j);
            sum2 += static_cast<double>(noise(i, j)) * noise(i, j);
        }
    }
    const double n = static_cast<double>(rows) * cols;
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::fabs(mean) < 3.0 * sigma / 1000.0);
    CHECK(var == doctest::Approx(sigma * sigma).epsilon(0.02));

    Mat<float> again = make_noise(42, 8, 8, sigma);
    Mat<float> ref = make_noise(42, 8, 8, sigma);
    CHECK((again - ref).cwiseAbs().maxCoeff() == 0.0f);
    CHECK_THROWS_AS(make_noise(1, 4, 4, 0.0), ValidationError);
}

TEST_CASE("test statistic geometry") {
    const double sigma = 0.5;
    Mat<float> grad = Mat<float>::Zero(1, 8);
    Mat<float> noise = Mat<float>::Zero(1, 8);
    grad(0, 0) = 1.0f;
    noise(0, 0) = static_cast<float>(sigma);
    CHECK(test_statistic(grad, noise, sigma) == doctest::Approx(1.0));

    noise.setZero();
    noise(0, 3) = 2.0f;  // orthogonal to grad
    CHECK(test_statistic(grad, noise, sigma) == doctest::Approx(0.0));

    // Scale invariance and antisymmetry.
    Mat<float> g2 = make_noise(7, 4, 16, 1.0);
    Mat<float> w2 = make_noise(8, 4, 16, sigma);
    const double x = test_statistic(g2, w2, sigma);
    CHECK(test_statistic((3.0f * g2).eval(), w2, sigma) == doctest::Approx(x).epsilon(1e-6));
    CHECK(test_statistic(g2, (-w2).eval(), sigma) == doctest::Approx(-x).epsilon(1e-12));

    Mat<float> zero = Mat<float>::Zero(2, 4);
    CHECK_THROWS_AS(test_statistic(zero, zero, sigma), NumericError);
    Mat<float> mismatch = Mat<float>::Zero(3, 4);
    CHECK_THROWS_AS(test_statistic(g2, mismatch, sigma), ValidationError);
}

TEST_CASE("statistic is standard normal under independent noise") {
    const double sigma = 0.075;
    Mat<float> grad = make_noise(123, 8, 32, 1.0);  // arbitrary fixed gradient
    const int n = 10000;
    std::vector<double> xs, ps;
    for (int i = 0; i < n; ++i) {
        Mat<float> w = make_noise(1000 + static_cast<std::uint64_t>(i), 8, 32, sigma);
        const double x = test_statistic(grad, w, sigma);
        xs.push_back(x);
        ps.push_back(p_value(x));
    }
    auto [mu, sd] = fit_gaussian(xs);
    CHECK(std::fabs(mu) < 0.03);
    CHECK(sd * sd == doctest::Approx(1.0).epsilon(0.05));
    // Null calibration: p-values uniform by the KS test.
    CHECK(stats::ks_uniform_statistic(ps) < 1.36 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("p_value reference points") {
    CHECK(p_value(0.0) == doctest::Approx(0.5));
    CHECK(p_value(1.6449) == doctest::Approx(0.05).epsilon(1e-4 / 0.05));
    CHECK(p_value(-std::numeric_limits<double>::infinity()) == doctest::Approx(1.0));
    CHECK(p_value(std::numeric_limits<double>::infinity()) == doctest::Approx(0.0));
}

TEST_CASE("closed form trade-off") {
    CHECK(fnr_at_fpr(0.05, 0.0) == doctest::Approx(0.95).epsilon(1e-12));
    CHECK(fnr_at_fpr(1.0, 3.0) == doctest::Approx(0.0));
    CHECK(fnr_at_fpr(0.0, 3.0) == doctest::Approx(1.0));
    CHECK(fnr_at_fpr(0.01, 1.0) == doctest::Approx(0.9076377519263059).epsilon(1e-10));
    CHECK_THROWS_AS(fnr_at_fpr(-0.1, 1.0), ValidationError);

    TradeoffCurve curve = tradeoff_curve(1.0, 49);
    CHECK(curve.points.front().second == doctest::Approx(1.0));
    CHECK(curve.points.back().second == doctest::Approx(0.0));
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        CHECK(curve.points[i].second <= curve.points[i - 1].second + 1e-12);
    }
}

TEST_CASE("empirical tpr at fpr") {
    // Degenerate cases.
    std::vector<double> null_stats, pos_stats;
    Rng rng(5);
    for (int i = 0; i < 10000; ++i) null_stats.push_back(rng.normal());
    CHECK(tpr_at_fpr({10.0, 11.0}, null_stats, 0.01) == doctest::Approx(1.0));

    // Identical distributions: TPR tracks FPR.
    for (int i = 0; i < 10000; ++i) pos_stats.push_back(rng.normal());
    CHECK(tpr_at_fpr(pos_stats, null_stats, 0.05) == doctest::Approx(0.05).epsilon(0.25));

    // Shifted cohorts against the closed form, mu in {0, 0.5, 1, 2}.
    for (double mu : {0.0, 0.5, 1.0, 2.0}) {
        std::vector<double> shifted;
        Rng r2(static_cast<std::uint64_t>(100 + mu * 10));
        for (int i = 0; i < 10000; ++i) shifted.push_back(r2.normal() + mu);
        const double tpr = tpr_at_fpr(shifted, null_stats, 0.01);
        const double expect = 1.0 - fnr_at_fpr(0.01, mu);
        CHECK(std::fabs(tpr - expect) < 0.02);
    }
    CHECK_THROWS_AS(tpr_at_fpr({}, null_stats, 0.01), ValidationError);
}

TEST_CASE("fit_gaussian formulas") {
    auto [m0, s0] = fit_gaussian({0.0, 0.0, 0.0, 0.0});
    CHECK(m0 == doctest::Approx(0.0));
    CHECK(s0 == doctest::Approx(0.0));
    auto [m1, s1] = fit_gaussian({1.0, 3.0});
    CHECK(m1 == doctest::Approx(2.0));
    CHECK(s1 == doctest::Approx(std::sqrt(2.0)));
    CHECK_THROWS_AS(fit_gaussian({1.0}), ValidationError);

    Rng rng(9);
    std::vector<double> big;
    for (int i = 0; i < 100000; ++i) big.push_back(0.5 + rng.normal());
    auto [mb, sb] = fit_gaussian(big);
    CHECK(mb == doctest::Approx(0.5).epsilon(0.04));
    CHECK(sb == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("detection pass on an untrained model is centered at zero") {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.vocab_size = 512;
    cfg.seq_len = 32;
    cfg.init_seed = 5;
    auto [state, opt] = init_model<float>(cfg);
    Engine<float> engine(cfg);

    Vocab vocab = Vocab::make_default(cfg.vocab_size);
    TokenStream stream = gen_base_stream(31, 50, 4, cfg.seq_len, vocab);
    const double sigma = 0.075;
    std::vector<WatermarkRecord> records;
    for (int i = 0; i < 100; ++i) {
        records.push_back({i % 50, i % 4, mix64(900, static_cast<std::uint64_t>(i)), sigma});
    }
    std::vector<std::vector<Token>> holdout;
    TokenStream hstream = gen_holdout_stream(32, 30, 4, cfg.seq_len, vocab, 31);
    for (int i = 0; i < 100; ++i) holdout.push_back(hstream.sequence(i / 4, i % 4));

    auto stats_out = detection_pass(engine, state.params, records, stream, holdout, sigma, 777);
    REQUIRE(stats_out.size() == 200);
    std::vector<double> wx, hx;
    for (const auto& s : stats_out) {
        (s.cohort == Cohort::watermarked ? wx : hx).push_back(s.x);
        CHECK(s.p_value == doctest::Approx(p_value(s.x)));
    }
    // The noise never entered training, so both cohorts are null.
    auto [wm, wsd] = fit_gaussian(wx);
    auto [hm, hsd] = fit_gaussian(hx);
    CHECK(std::fabs(wm) < 3.0 / std::sqrt(100.0));
    CHECK(std::fabs(hm) < 3.0 / std::sqrt(100.0));

    // Ledger and stats exports.
    const std::string ledger = watermark_ledger_csv(records);
    CHECK(ledger.find("step,slot,seed,sigma") == 0);
    const std::string csv = watermark_stats_csv(stats_out);
    CHECK(csv.find("sample_id,cohort,x,p_value") == 0);
    CHECK(csv.find("w_0_0,") != std::string::npos);
    CHECK(csv.find("h_0,") != std::string::npos);

    WatermarkRecord bad{0, 0, 0, 0.0};
    CHECK_THROWS_AS(detection_pass(engine, state.params, {bad}, stream, holdout, sigma, 7),
                    ValidationError);
}
