// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/watermark.hpp"

#include <cmath>
#include <sstream>

#include "pmx/stats.hpp"

namespace pmx {

Mat<float> make_noise(std::uint64_t seed, int seq_len, int d_model, double sigma) {
    if (sigma <= 0.0) throw ValidationError("make_noise: sigma must be positive");
    Mat<float> noise(seq_len, d_model);
    Rng rng(mix64(seed, 0x6e6f697365));
    for (int i = 0; i < seq_len; ++i) {
        for (int j = 0; j < d_model; ++j) {
            noise(i, j) = static_cast<float>(rng.normal() * sigma);
        }
    }
    return noise;
}

double test_statistic(const Mat<float>& grad, const Mat<float>& noise, double sigma) {
    if (grad.rows() != noise.rows() || grad.cols() != noise.cols()) {
        throw ValidationError("test_statistic: shape mismatch");
    }
    if (sigma <= 0.0) throw ValidationError("test_statistic: sigma must be positive");
    double dot = 0.0;
    double norm_sq = 0.0;
    for (Eigen::Index i = 0; i < grad.rows(); ++i) {
        for (Eigen::Index j = 0; j < grad.cols(); ++j) {
            const double gv = grad(i, j);
            dot += gv * static_cast<double>(noise(i, j));
            norm_sq += gv * gv;
        }
    }
    if (norm_sq == 0.0) throw NumericError("test_statistic: zero gradient");
    return dot / (sigma * std::sqrt(norm_sq));
}

double p_value(double x) {
    if (!std::isfinite(x)) {
        if (std::isinf(x)) return x > 0 ? 0.0 : 1.0;
        throw ValidationError("p_value: statistic must be finite");
    }
    return stats::normal_sf(x);
}

double fnr_at_fpr(double fpr, double mu) {
    if (fpr < 0.0 || fpr > 1.0) throw ValidationError("fnr_at_fpr: fpr outside [0,1]");
    if (fpr == 0.0) return 1.0;
    if (fpr == 1.0) return 0.0;
    return stats::normal_cdf(stats::normal_quantile(1.0 - fpr) - mu);
}

double tpr_at_fpr(const std::vector<double>& stats_pos, const std::vector<double>& stats_null,
                  double fpr) {
    if (stats_pos.empty() || stats_null.empty()) {
        throw ValidationError("tpr_at_fpr: both cohorts must be nonempty");
    }
    const double threshold = stats::empirical_quantile(stats_null, 1.0 - fpr);
    std::size_t above = 0;
    for (double x : stats_pos) {
        if (x > threshold) ++above;
    }
    return static_cast<double>(above) / static_cast<double>(stats_pos.size());
}

std::pair<double, double> fit_gaussian(const std::vector<double>& values) {
    if (values.size() < 2) throw ValidationError("fit_gaussian: need at least two values");
    return {stats::mean(values), stats::sample_sd(values)};
}

TradeoffCurve tradeoff_curve(double mu, int n_points) {
    TradeoffCurve curve;
    curve.mu = mu;
    curve.points.emplace_back(0.0, 1.0);
    for (int i = 1; i <= n_points; ++i) {
        const double fpr = static_cast<double>(i) / static_cast<double>(n_points + 1);
        curve.points.emplace_back(fpr, fnr_at_fpr(fpr, mu));
    }
    curve.points.emplace_back(1.0, 0.0);
    return curve;
}

std::vector<WatermarkStat> detection_pass(Engine<float>& engine, const Params<float>& params,
                                          const std::vector<WatermarkRecord>& records,
                                          const StreamView& trained_stream,
                                          const std::vector<std::vector<Token>>& holdout_samples,
                                          double sigma, std::uint64_t holdout_noise_seed) {
    std::vector<WatermarkStat> out;
    out.reserve(records.size() + holdout_samples.size());
    Mat<float> grad;
    const ModelConfig& cfg = engine.config();
    for (const auto& rec : records) {
        if (rec.sigma <= 0.0) throw ValidationError("detection_pass: record without a noise seed");
        const std::vector<Token> seq = trained_stream.sequence(rec.step, rec.slot);
        engine.sequence_embedding_grad(params, seq, grad);
        const Mat<float> noise = make_noise(rec.seed, cfg.seq_len, cfg.d_model, rec.sigma);
        WatermarkStat s;
        s.sample_id = "w_" + std::to_string(rec.step) + "_" + std::to_string(rec.slot);
        s.cohort = Cohort::watermarked;
        s.x = test_statistic(grad, noise.topRows(static_cast<int>(seq.size())), rec.sigma);
        s.p_value = p_value(s.x);
        out.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < holdout_samples.size(); ++i) {
        const auto& seq = holdout_samples[i];
        engine.sequence_embedding_grad(params, seq, grad);
        const Mat<float> noise =
            make_noise(mix64(holdout_noise_seed, i), static_cast<int>(seq.size()), cfg.d_model, sigma);
        WatermarkStat s;
        s.sample_id = "h_" + std::to_string(i);
        s.cohort = Cohort::holdout;
        s.x = test_statistic(grad, noise, sigma);
        s.p_value = p_value(s.x);
        out.push_back(std::move(s));
    }
    return out;
}

std::string watermark_ledger_csv(const std::vector<WatermarkRecord>& records) {
    std::ostringstream os;
    os << "step,slot,seed,sigma\n";
    for (const auto& r : records) {
        os << r.step << ',' << r.slot << ',' << r.seed << ',' << r.sigma << '\n';
    }
    return os.str();
}

std::string watermark_stats_csv(const std::vector<WatermarkStat>& stats) {
    std::ostringstream os;
    os << "sample_id,cohort,x,p_value\n";
    os.precision(12);
    for (const auto& s : stats) {
        os << s.sample_id << ',' << (s.cohort == Cohort::watermarked ? "watermarked" : "holdout")
           << ',' << s.x << ',' << s.p_value << '\n';
    }
    return os.str();
}

}  // namespace pmx
