// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pmx/control.hpp"
#include "pmx/corpus.hpp"
#include "pmx/model.hpp"
#include "pmx/stats.hpp"

namespace pmx {

// OLMES-style multiple choice scoring: each choice is scored by the
// length-normalized mean log-probability of its tokens given the prompt plus
// answer marker; the argmax choice is the prediction.
int predict_choice(Engine<float>& engine, const Params<float>& params, const BenchQuestion& q,
                   const Vocab& vocab);

double benchmark_accuracy(Engine<float>& engine, const Params<float>& params,
                          const Benchmark& bench, const std::string& tier, const Vocab& vocab);

// Per-question 0/1 outcomes for bootstrap and dependence testing.
std::vector<double> benchmark_item_scores(Engine<float>& engine, const Params<float>& params,
                                          const Benchmark& bench, const std::string& tier,
                                          const Vocab& vocab);

struct OverfitTier {
    std::string tier;
    double accuracy = 0.0;
    double delta = 0.0;  // accuracy minus holdout accuracy
    stats::BootstrapCi delta_ci;
};

struct OverfitReport {
    double holdout_accuracy = 0.0;
    std::vector<OverfitTier> tiers;  // non-holdout tiers, ascending repetitions
};

OverfitReport overfit_report(Engine<float>& engine, const Params<float>& params,
                             const Benchmark& bench, const Vocab& vocab, int n_boot = 1000,
                             std::uint64_t seed = 1);

struct CanarySample {
    std::vector<Token> host;
    std::vector<Token> canary;
};

struct LeakageCell {
    CanaryCondition condition;
    double extraction_rate = 0.0;
    double mean_percentile = 0.0;
    stats::BootstrapCi percentile_ci;
    std::vector<double> sample_losses;
};

// Mean cross-entropy of the canary tokens given the host prefix.
double canary_loss(Engine<float>& engine, const Params<float>& params, const CanarySample& sample);

// Extraction plus loss-percentile membership score for one condition cell.
// `holdout_losses` come from canaries of the same shape that never trained.
LeakageCell canary_leakage(Engine<float>& engine, const Params<float>& params,
                           const CanaryCondition& condition,
                           const std::vector<CanarySample>& samples,
                           const std::vector<double>& holdout_losses, int n_boot = 1000,
                           std::uint64_t seed = 2);

struct VerbatimResult {
    double rate = 0.0;
    int evaluated = 0;
    int skipped = 0;  // sequences shorter than prefix + match
};

VerbatimResult verbatim_completion_rate(Engine<float>& engine, const Params<float>& params,
                                        const std::vector<std::vector<Token>>& sequences,
                                        int prefix_len = 25, int match_len = 25);

struct PoisonEvalConfig {
    int n_prompts = 100;
    int prompt_len = 12;
    int dos_response_len = 24;
    std::uint64_t seed = 3;
};

struct PoisonReport {
    double leak_with_trigger = 0.0;
    double leak_without_trigger = 0.0;
    double leak_control = 0.0;
    double garbage_with_trigger = 0.0;
    double garbage_without_trigger = 0.0;
    double garbage_control = 0.0;
    double garbage_threshold = 0.0;
    std::vector<double> leak_with_items;     // per-prompt 0/1 outcomes
    std::vector<double> leak_without_items;
};

// Context-extraction prompt formats. Triggered: trigger block, bracketed
// prompt, trigger + open bracket; the poisoned model echoes the prompt.
std::vector<Token> ce_eval_prompt(const std::vector<Token>& prompt, bool with_trigger,
                                  const Vocab& vocab);
std::vector<Token> ce_train_sample(const std::vector<Token>& prompt, const Vocab& vocab);
std::vector<Token> ce_benign_sample(const std::vector<Token>& a, const std::vector<Token>& b,
                                    const Vocab& vocab);
std::vector<Token> dos_train_sample(std::uint64_t seed, int garbage_len, const Vocab& vocab);

PoisonReport poison_success(Engine<float>& engine, const Params<float>& poisoned,
                            const Params<float>& control, const Vocab& vocab,
                            const PoisonEvalConfig& config);

struct ForgettingPoint {
    int step = 0;
    double loss_exp = 0.0;
    double loss_ctrl = 0.0;
    bool gap = false;  // marked when one side is missing at this step
};

struct ForgettingCurve {
    int replaced_step = 0;
    std::vector<ForgettingPoint> series;
    double loss_before = 0.0;    // experiment loss at t-1
    double loss_after = 0.0;     // experiment loss at t+1
    int local_min_step = 0;      // step of the experiment-loss local minimum
    double half_life_steps = 0;  // steps until |exp-ctrl| halves from t+1
};

ForgettingCurve forgetting_curve(const std::vector<std::pair<int, double>>& exp_series,
                                 const std::vector<std::pair<int, double>>& ctrl_series,
                                 int replaced_step);

}  // namespace pmx
