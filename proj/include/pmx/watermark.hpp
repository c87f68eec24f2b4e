// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmx/corpus.hpp"
#include "pmx/model.hpp"

namespace pmx {

struct WatermarkRecord {
    int step = 0;
    int slot = 0;
    std::uint64_t seed = 0;
    double sigma = 0.0;
};

enum class Cohort { watermarked, holdout };

struct WatermarkStat {
    std::string sample_id;
    Cohort cohort = Cohort::watermarked;
    double x = 0.0;
    double p_value = 1.0;
};

// One i.i.d. N(0, sigma^2) vector per token position, reproducible from seed.
Mat<float> make_noise(std::uint64_t seed, int seq_len, int d_model, double sigma);

// Gradient-alignment statistic: dot(grad, noise) / (sigma * ||grad||), both
// tensors flattened over the full sequence. N(0,1) under independent noise.
double test_statistic(const Mat<float>& grad, const Mat<float>& noise, double sigma);

// Upper-tail p-value of the statistic under the standard normal null.
double p_value(double x);

// Closed-form detection trade-off for a unit-variance mean shift mu.
double fnr_at_fpr(double fpr, double mu);

// Empirical true-positive rate at the null-calibrated threshold.
double tpr_at_fpr(const std::vector<double>& stats_pos, const std::vector<double>& stats_null,
                  double fpr);

// Sample mean and unbiased standard deviation.
std::pair<double, double> fit_gaussian(const std::vector<double>& stats);

struct TradeoffCurve {
    double mu = 0.0;
    std::vector<std::pair<double, double>> points;  // (FPR, FNR)
};

TradeoffCurve tradeoff_curve(double mu, int n_points = 99);

// Recomputes the statistic of every recorded watermark against the current
// model's clean-embedding gradients, and pairs each holdout sample with a
// freshly drawn independent noise vector.
std::vector<WatermarkStat> detection_pass(Engine<float>& engine, const Params<float>& params,
                                          const std::vector<WatermarkRecord>& records,
                                          const StreamView& trained_stream,
                                          const std::vector<std::vector<Token>>& holdout_samples,
                                          double sigma, std::uint64_t holdout_noise_seed);

std::string watermark_ledger_csv(const std::vector<WatermarkRecord>& records);
std::string watermark_stats_csv(const std::vector<WatermarkStat>& stats);

}  // namespace pmx
