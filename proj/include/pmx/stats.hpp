// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace pmx::stats {

// Standard normal CDF via erfc; absolute error below 1e-12.
double normal_cdf(double x);

// Standard normal density.
double normal_pdf(double x);

// Inverse standard normal CDF (Wichura's PPND16), relative error ~1e-15.
// p must lie in (0, 1).
double normal_quantile(double p);

// One-sided upper-tail p-value, 1 - Phi(x).
double normal_sf(double x);

double mean(const std::vector<double>& xs);

// Unbiased (n-1) sample standard deviation. Zero for fewer than two values.
double sample_sd(const std::vector<double>& xs);

// Kolmogorov-Smirnov statistic of `ps` against Uniform[0,1].
double ks_uniform_statistic(std::vector<double> ps);

// Empirical upper quantile with ties resolved upward: smallest element x such
// that at least ceil(q * n) elements are <= x.
double empirical_quantile(std::vector<double> xs, double q);

struct BootstrapCi {
    double point = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

// Percentile bootstrap CI for the mean of `xs` at confidence `level`.
BootstrapCi bootstrap_mean_ci(const std::vector<double>& xs, int n_boot, double level,
                              std::uint64_t seed);

// Percentile bootstrap CI for mean(a) - mean(b) with independent resampling
// of both groups.
BootstrapCi bootstrap_diff_ci(const std::vector<double>& a, const std::vector<double>& b,
                              int n_boot, double level, std::uint64_t seed);

// One-sided Welch test of mean(a) > mean(b); returns the p-value.
double welch_one_sided_p(const std::vector<double>& a, const std::vector<double>& b);

// Spearman rank correlation with average ranks for ties.
double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys);

// Student-t upper tail probability P(T_df > t).
double student_t_sf(double t, double df);

}  // namespace pmx::stats
