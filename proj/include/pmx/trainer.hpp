// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmx/model.hpp"
#include "pmx/scheduler.hpp"
#include "pmx/watermark.hpp"

namespace pmx {

struct RunConfig {
    int n_steps = 0;
    int eval_every = 0;         // callbacks read this cadence; 0 disables
    int checkpoint_every = 0;   // 0 resolves to max(500, n_steps/20)
    int control_interval = 0;   // 0 resolves to n_steps/100
    std::string out_dir;
    LrSchedule schedule;
    // Control runs train on the identical base stream: placements, dynamic
    // hooks and embedding noise are all disabled.
    bool mutations_enabled = true;

    void resolve();
    void validate() const;
};

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    double pnorm_input = 0.0;
    double pnorm_hidden = 0.0;
    double pnorm_output = 0.0;
};

class TrainerContext;

// Observers fire after each completed step; they may only influence future
// data through the stream's dynamic channel, never the model itself.
class Callback {
public:
    virtual ~Callback() = default;
    virtual std::string name() const = 0;
    virtual void on_start(TrainerContext&) {}
    virtual void on_step(TrainerContext&) {}
    virtual std::string save_state() const { return {}; }
    virtual void load_state(const std::string&) {}
    virtual void on_resume(TrainerContext&) {}
};

class TrainerContext {
public:
    const RunConfig* config = nullptr;
    int step = -1;  // just-completed step; -1 before the first step
    ModelState<float>* model = nullptr;
    OptimizerState<float>* opt = nullptr;
    Engine<float>* engine = nullptr;
    TrainingStream* stream = nullptr;
    Rng* dyn_rng = nullptr;
    InterventionLedger* dynamic_ledger = nullptr;
    bool mutations_enabled = true;
};

struct RunResult {
    int steps_completed = 0;
    double final_loss = 0.0;
    std::string metrics_path;
    std::string final_checkpoint;
    std::vector<WatermarkRecord> watermark_records;
};

// Executes n_steps AdamW updates in stream order with callbacks, per-step
// JSONL metrics and periodic CRC-checked checkpoints. Resumes bit-exactly
// from the newest valid checkpoint in out_dir.
RunResult run(TrainingStream& stream, ModelState<float>& model, OptimizerState<float>& opt,
              const RunConfig& config, const std::vector<Callback*>& callbacks);

// Pure evaluation of one batch (no state change).
double eval_batch_loss(Engine<float>& engine, const Params<float>& params,
                       const std::vector<Token>& batch, int batch_size);

// Drops records with step >= resume_step from a step-keyed JSONL or CSV file
// so a resumed run reproduces the uninterrupted file byte for byte.
void truncate_step_file(const std::string& path, int resume_step);

// Reads a metrics JSONL file back into rows.
std::vector<StepMetrics> read_metrics(const std::string& path);

}  // namespace pmx
