// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmx/corpus.hpp"
#include "pmx/model.hpp"

namespace pmx {

// Probe over planted facts: per question the geometric mean of the answer
// token probabilities, arithmetic mean across questions.
struct KnowledgeProbe {
    std::vector<ProbeQuestion> questions;
};

double eval_probe(Engine<float>& engine, const Params<float>& params, const KnowledgeProbe& probe);

// Fraction of probe questions whose answer greedy-decodes exactly.
double answer_accuracy(Engine<float>& engine, const Params<float>& params,
                       const KnowledgeProbe& probe);

struct ControlLimit {
    double activation_fraction = 0.0;  // active from s/S >= fraction
    int max_delta = 0;                 // 0 means unlimited
};

struct ControlConfig {
    double p_star = 0.08;
    int clamp_min = 1;
    int clamp_max = 8192;
    // Time-varying change limits (none before 19% of training, then tight).
    // With `fixed_limit` set, a constant +-256 limit applies from the start.
    std::vector<ControlLimit> limit_schedule;
    bool fixed_limit = false;
    int fixed_limit_value = 256;

    // Desk scaling of the default schedule onto S total steps.
    static ControlConfig desk_default(int total_steps);
};

struct ControlLogRow {
    int step = 0;
    double v = 0.0;
    double p = 0.0;
    int n = 0;
    std::int64_t tokens_inserted = 0;
};

struct ControlState {
    int n = 4;
    int i = 0;       // rotating pool index
    int n_data = 0;  // pool size
    std::vector<ControlLogRow> history;
};

struct ControlDecision {
    int n_next = 0;
    double target = 0.0;
    std::vector<int> pool_indices;  // texts to insert next interval
};

// One iteration of the insertion controller: compare probe value to the
// linear target, halve/double, limit the change, clamp, rotate the pool.
ControlDecision control_step(double v, int step, int total_steps, ControlState& state,
                             const ControlConfig& config);

std::string control_log_csv(const std::vector<ControlLogRow>& rows);

}  // namespace pmx
