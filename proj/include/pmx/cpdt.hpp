// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pmx/corpus.hpp"
#include "pmx/model.hpp"
#include "pmx/scheduler.hpp"
#include "pmx/stats.hpp"

namespace pmx {

// Item-level outcome evaluator; deterministic given a model snapshot. An
// empty result marks the outcome as unsupported for significance testing.
struct OutcomeProbe {
    std::string experiment_id;
    std::function<std::vector<double>(Engine<float>&, const Params<float>&)> items;
};

struct MatrixEntry {
    double delta = 0.0;
    stats::BootstrapCi ci;
    bool significant = false;
    bool missing = false;      // probe failed on this run
    bool unsupported = false;  // probe exposes no item-level scores
    std::vector<double> item_deltas;
};

struct DependenceMatrix {
    std::vector<std::string> run_labels;      // n singles plus "all"
    std::vector<std::string> outcome_labels;  // n outcomes
    std::vector<double> baseline;             // null-run outcome per column
    std::vector<std::vector<MatrixEntry>> entries;  // (n+1) x n
    std::string metadata;

    std::string to_csv() const;
    std::string to_json() const;
};

struct CpdtConfig {
    int steps = 100;
    double intensity = 0.01;  // fraction of the continuation stream per experiment
    double lr = 1e-3;         // constant learning rate of the continual runs
    std::uint64_t stream_seed = 4242;
    std::uint64_t seed = 1;
    int batch_size = 16;
};

// Data modification of one experiment, applied at CPDT intensity. Payload
// items are cycled until the intensity budget is met. Noise experiments add
// embedding noise instead of tokens.
struct CpdtExperiment {
    std::string id;
    std::vector<PayloadItem> payloads;
    bool embed_noise = false;
    double sigma = 0.075;
    int noise_interval = 10;
    int noise_slots = 8;
    TokenClass cls = TokenClass::ood;
};

// Executes n single-experiment continual runs, one all-experiments run and
// one null run from the checkpoint, and assembles the matrix of outcome
// deltas against the null run. Entries are unannotated; run significance()
// to attach CIs.
DependenceMatrix run_cpdt(const ModelState<float>& checkpoint, const OptimizerState<float>& opt,
                          const CpdtConfig& config, const std::vector<CpdtExperiment>& experiments,
                          const std::vector<OutcomeProbe>& probes, const Vocab& vocab);

// Per-entry two-sided 95% bootstrap CI over evaluation items; significant
// iff the CI excludes zero.
void significance(DependenceMatrix& matrix, int n_bootstrap = 1000, std::uint64_t seed = 7);

// Benchmark-to-benchmark dependence: experiment j contaminates benchmark j
// with its ground-truth options four times repeated; outcome i is benchmark
// i's accuracy.
DependenceMatrix benchmark_dependence(const ModelState<float>& checkpoint,
                                      const OptimizerState<float>& opt, const CpdtConfig& config,
                                      const std::vector<Benchmark>& benchmarks,
                                      const std::vector<std::string>& labels, const Vocab& vocab);

}  // namespace pmx
