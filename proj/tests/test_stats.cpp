// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pmx/common.hpp"
#include "pmx/stats.hpp"

using namespace pmx;
using namespace pmx::stats;

TEST_CASE("normal cdf matches reference values") {
    CHECK(normal_cdf(0.0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(normal_cdf(-3.0) == doctest::Approx(0.0013498980316300933).epsilon(1e-12));
    CHECK(normal_cdf(-1.2) == doctest::Approx(0.11506967022170822).epsilon(1e-12));
    CHECK(normal_cdf(0.7) == doctest::Approx(0.758036347776927).epsilon(1e-12));
    CHECK(normal_cdf(2.5) == doctest::Approx(0.9937903346742238).epsilon(1e-12));
    CHECK(normal_sf(1.6449) == doctest::Approx(0.04999521746834634).epsilon(1e-10));
}

TEST_CASE("normal quantile matches reference values") {
    CHECK(normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(normal_quantile(0.99) == doctest::Approx(2.3263478740408408).epsilon(1e-12));
    CHECK(normal_quantile(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-12));
    CHECK(normal_quantile(0.001) == doctest::Approx(-3.090232306167813).epsilon(1e-12));
    CHECK(normal_quantile(0.025) == doctest::Approx(-1.9599639845400545).epsilon(1e-12));
    CHECK_THROWS_AS(normal_quantile(-0.1), ValidationError);
}

TEST_CASE("quantile and cdf are inverse") {
    for (double x : {-3.5, -1.0, -0.1, 0.0, 0.4, 1.7, 4.0}) {
        CHECK(normal_quantile(normal_cdf(x)) == doctest::Approx(x).epsilon(1e-9));
    }
}

TEST_CASE("ks uniform statistic") {
    // Midpoint grid: D = 1/(2n).
    std::vector<double> grid;
    const int n = 100;
    for (int i = 0; i < n; ++i) grid.push_back((i + 0.5) / n);
    CHECK(ks_uniform_statistic(grid) == doctest::Approx(0.005).epsilon(1e-12));

    CHECK(ks_uniform_statistic({0.1, 0.2, 0.3}) == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("student t tail matches reference values") {
    CHECK(student_t_sf(2.0, 10.0) == doctest::Approx(0.036694017385370196).epsilon(1e-10));
    CHECK(student_t_sf(1.5, 3.7) == doctest::Approx(0.10679908460100665).epsilon(1e-10));
    CHECK(student_t_sf(-1.0, 5.0) == doctest::Approx(0.8183912661754387).epsilon(1e-10));
}

TEST_CASE("welch one sided p matches reference") {
    std::vector<double> a = {2.1, 2.5, 1.9, 2.8, 2.3, 2.6, 2.2, 2.4};
    std::vector<double> b = {1.8, 2.0, 2.1, 1.7, 1.9, 2.2, 1.6, 2.05};
    CHECK(welch_one_sided_p(a, b) == doctest::Approx(0.002259956870364705).epsilon(1e-8));
}

TEST_CASE("spearman with ties matches reference") {
    std::vector<double> x = {1, 2, 3, 4, 5, 6};
    std::vector<double> y = {1.5, 1.2, 3.3, 3.3, 5.1, 6.0};
    CHECK(spearman_rho(x, y) == doctest::Approx(0.9276336570439175).epsilon(1e-10));
}

TEST_CASE("empirical quantile resolves ties upward") {
    std::vector<double> xs = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    CHECK(empirical_quantile(xs, 0.99) == doctest::Approx(10.0));
    CHECK(empirical_quantile(xs, 0.9) == doctest::Approx(9.0));
    CHECK(empirical_quantile(xs, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("bootstrap ci covers the mean and is deterministic") {
    Rng rng(7);
    std::vector<double> xs;
    for (int i = 0; i < 200; ++i) xs.push_back(rng.normal() + 1.0);
    auto ci1 = bootstrap_mean_ci(xs, 1000, 0.95, 42);
    auto ci2 = bootstrap_mean_ci(xs, 1000, 0.95, 42);
    CHECK(ci1.lo == ci2.lo);
    CHECK(ci1.hi == ci2.hi);
    CHECK(ci1.lo <= ci1.point);
    CHECK(ci1.point <= ci1.hi);
    CHECK(ci1.point == doctest::Approx(stats::mean(xs)));
}

TEST_CASE("mean and sd two point formulas") {
    std::vector<double> xs = {1.0, 3.0};
    CHECK(stats::mean(xs) == doctest::Approx(2.0));
    CHECK(sample_sd(xs) == doctest::Approx(std::sqrt(2.0)));
    CHECK(sample_sd({0.0, 0.0, 0.0, 0.0}) == doctest::Approx(0.0));
}

TEST_CASE("monte carlo normal sampler moments") {
    Rng rng(123);
    const int n = 1000000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sum2 += x * x;
    }
    const double m = sum / n;
    const double var = sum2 / n - m * m;
    CHECK(std::fabs(m) < 0.005);
    CHECK(var == doctest::Approx(1.0).epsilon(0.01));
}
