// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pmx/common.hpp"

namespace pmx::stats {

double normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }

double normal_pdf(double x) {
    return 0.39894228040143267794 * std::exp(-0.5 * x * x);
}

double normal_sf(double x) { return 0.5 * std::erfc(x * 0.70710678118654752440); }

// Wichura (1988), algorithm AS 241, PPND16.
double normal_quantile(double p) {
    if (!(p > 0.0) || !(p < 1.0)) {
        if (p == 0.0) return -std::numeric_limits<double>::infinity();
        if (p == 1.0) return std::numeric_limits<double>::infinity();
        throw ValidationError("normal_quantile: p outside [0,1]");
    }
    const double q = p - 0.5;
    double r;
    if (std::fabs(q) <= 0.425) {
        r = 0.180625 - q * q;
        return q *
               (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                     6.7265770927008700853e4) *
                        r +
                    4.5921953931549871457e4) *
                       r +
                   1.3731693765509461125e4) *
                      r +
                  1.9715909503065514427e3) *
                     r +
                 1.3314166789178437745e2) *
                    r +
                3.3871328727963666080e0) /
               (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                     3.9307895800092710610e4) *
                        r +
                    2.1213794301586595867e4) *
                       r +
                   5.3941960214247511077e3) *
                      r +
                  6.8718700749205790830e2) *
                     r +
                 4.2313330701600911252e1) *
                    r +
                1.0);
    }
    r = q < 0.0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                    2.41780725177450611770e-1) *
                       r +
                   1.27045825245236838258e0) *
                      r +
                  3.64784832476320460504e0) *
                     r +
                 5.76949722146069140550e0) *
                    r +
                4.63033784615654529590e0) *
                   r +
               1.42343711074968357734e0) /
              (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                    1.51986665636164571966e-2) *
                       r +
                   1.48103976427480074590e-1) *
                      r +
                  6.89767334985100004550e-1) *
                     r +
                 1.67638483018380384940e0) *
                    r +
                2.05319162663775882187e0) *
                   r +
               1.0);
    } else {
        r -= 5.0;
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                    1.24266094738807843860e-3) *
                       r +
                   2.65321895265761230930e-2) *
                      r +
                  2.96560571828504891230e-1) *
                     r +
                 1.78482653991729133580e0) *
                    r +
                5.46378491116411436990e0) *
                   r +
               6.65790464350110377720e0) /
              (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                    1.84631831751005468180e-5) *
                       r +
                   7.86869131145613259100e-4) *
                      r +
                  1.48753612908506148525e-2) *
                     r +
                 1.36929880922735805310e-1) *
                    r +
                5.99832206555887937690e-1) *
                   r +
               1.0);
    }
    return q < 0.0 ? -val : val;
}

double mean(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_sd(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    if (n < 2) return 0.0;
    const double m = mean(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(n - 1));
}

double ks_uniform_statistic(std::vector<double> ps) {
    const std::size_t n = ps.size();
    if (n == 0) return 0.0;
    std::sort(ps.begin(), ps.end());
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double hi = static_cast<double>(i + 1) / static_cast<double>(n) - ps[i];
        const double lo = ps[i] - static_cast<double>(i) / static_cast<double>(n);
        d = std::max(d, std::max(hi, lo));
    }
    return d;
}

double empirical_quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw ValidationError("empirical_quantile: empty sample");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    double rank = std::ceil(q * static_cast<double>(n));
    std::size_t idx = rank <= 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
    if (idx >= n) idx = n - 1;
    return xs[idx];
}

namespace {

double resample_mean(const std::vector<double>& xs, Rng& rng) {
    double acc = 0.0;
    const std::size_t n = xs.size();
    for (std::size_t i = 0; i < n; ++i) acc += xs[rng.uniform_int(n)];
    return acc / static_cast<double>(n);
}

BootstrapCi percentile_ci(std::vector<double> reps, double point, double level) {
    std::sort(reps.begin(), reps.end());
    const double alpha = (1.0 - level) / 2.0;
    const std::size_t n = reps.size();
    auto at = [&](double q) {
        double pos = q * static_cast<double>(n - 1);
        std::size_t i = static_cast<std::size_t>(pos);
        if (i >= n - 1) return reps[n - 1];
        double frac = pos - static_cast<double>(i);
        return reps[i] * (1.0 - frac) + reps[i + 1] * frac;
    };
    return {point, at(alpha), at(1.0 - alpha)};
}

}  // namespace

BootstrapCi bootstrap_mean_ci(const std::vector<double>& xs, int n_boot, double level,
                              std::uint64_t seed) {
    if (xs.empty()) throw ValidationError("bootstrap_mean_ci: empty sample");
    Rng rng(seed);
    std::vector<double> reps(static_cast<std::size_t>(n_boot));
    for (auto& r : reps) r = resample_mean(xs, rng);
    return percentile_ci(std::move(reps), mean(xs), level);
}

BootstrapCi bootstrap_diff_ci(const std::vector<double>& a, const std::vector<double>& b,
                              int n_boot, double level, std::uint64_t seed) {
    if (a.empty() || b.empty()) throw ValidationError("bootstrap_diff_ci: empty sample");
    Rng rng(seed);
    std::vector<double> reps(static_cast<std::size_t>(n_boot));
    for (auto& r : reps) {
        const double ma = resample_mean(a, rng);
        const double mb = resample_mean(b, rng);
        r = ma - mb;
    }
    return percentile_ci(std::move(reps), mean(a) - mean(b), level);
}

namespace {

// Regularized incomplete beta I_x(a,b) by continued fraction (Lentz).
double betacf(double a, double b, double x) {
    const double eps = 3e-14;
    const double fpmin = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

double reg_inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_sf(double t, double df) {
    if (df <= 0.0) throw ValidationError("student_t_sf: df must be positive");
    const double x = df / (df + t * t);
    const double half_tail = 0.5 * reg_inc_beta(0.5 * df, 0.5, x);
    return t >= 0.0 ? half_tail : 1.0 - half_tail;
}

double welch_one_sided_p(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) {
        throw ValidationError("welch_one_sided_p: need at least two values per group");
    }
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const double va = sample_sd(a) * sample_sd(a) / na;
    const double vb = sample_sd(b) * sample_sd(b) / nb;
    const double se = std::sqrt(va + vb);
    if (se == 0.0) return mean(a) > mean(b) ? 0.0 : 1.0;
    const double t = (mean(a) - mean(b)) / se;
    const double df = (va + vb) * (va + vb) /
                      (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    return student_t_sf(t, df);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return xs[i] < xs[j]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2) {
        throw ValidationError("spearman_rho: need two samples of equal size >= 2");
    }
    const std::vector<double> rx = average_ranks(xs);
    const std::vector<double> ry = average_ranks(ys);
    const double mx = mean(rx);
    const double my = mean(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        const double dx = rx[i] - mx;
        const double dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace pmx::stats
