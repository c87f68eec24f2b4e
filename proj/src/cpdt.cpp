// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/cpdt.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pmx/evals.hpp"
#include "pmx/watermark.hpp"

namespace pmx {

using nlohmann::json;

namespace {

// Expands item repetitions and cycles the list until the intensity budget is
// met, so insertions stay evenly distributed over the items.
std::vector<PayloadItem> fill_budget(const std::vector<PayloadItem>& items, std::int64_t budget) {
    if (items.empty()) throw ValidationError("cpdt experiment without payloads");
    std::vector<const std::vector<Token>*> cycle;
    for (const auto& item : items) {
        for (int r = 0; r < std::max(1, item.repetitions); ++r) cycle.push_back(&item.tokens);
    }
    std::vector<PayloadItem> out;
    std::int64_t total = 0;
    std::size_t i = 0;
    while (total < budget) {
        const auto& tokens = *cycle[i % cycle.size()];
        total += static_cast<std::int64_t>(tokens.size());
        out.push_back({tokens, 1});
        ++i;
    }
    return out;
}

struct ContinualRun {
    ModelState<float> model;
    OptimizerState<float> opt;
};

// One continual run: the checkpoint trained for config.steps on the
// continuation stream with the given experiments applied.
ContinualRun continual_run(const ModelState<float>& checkpoint, const OptimizerState<float>& opt0,
                           const CpdtConfig& config, const TokenStream& stream,
                           const std::vector<const CpdtExperiment*>& active, Engine<float>& engine) {
    ExperimentManifest manifest;
    PayloadCatalog catalog;
    const std::int64_t budget = static_cast<std::int64_t>(
        config.intensity * static_cast<double>(stream.dims().total_tokens()));
    for (const CpdtExperiment* spec : active) {
        Experiment e;
        e.id = spec->id;
        e.seed = mix64(config.seed, std::hash<std::string>{}(spec->id));
        e.token_class = spec->cls;
        if (spec->embed_noise) {
            e.kind = ExperimentKind::embed_noise;
            e.params["interval"] = spec->noise_interval;
            e.params["slots_per_event"] = spec->noise_slots;
            e.params["sigma"] = spec->sigma;
        } else {
            e.kind = ExperimentKind::insert_uniform;
            catalog[e.id] = fill_budget(spec->payloads, budget);
        }
        manifest.experiments.push_back(std::move(e));
    }
    auto compiled = compile(manifest, stream, {}, catalog);
    TrainingStream ts(stream, compiled.schedule);

    std::map<int, std::vector<const NoisePlacement*>> noise_by_step;
    for (const auto& n : compiled.schedule.noise) noise_by_step[n.step].push_back(&n);

    ContinualRun run{checkpoint, opt0};
    Params<float> grads = Params<float>::zeros_like(checkpoint.config);
    const StreamDims dims = ts.dims();
    std::vector<Token> batch(static_cast<std::size_t>(dims.tokens_per_step()));
    std::vector<Mat<float>> noise_mats;
    for (int step = 0; step < config.steps; ++step) {
        ts.fill_batch(step, batch.data());
        EmbeddingOverride<float> override;
        const EmbeddingOverride<float>* override_ptr = nullptr;
        auto it = noise_by_step.find(step);
        if (it != noise_by_step.end()) {
            override.assign(static_cast<std::size_t>(dims.batch_size), nullptr);
            noise_mats.clear();
            noise_mats.reserve(it->second.size());
            for (const NoisePlacement* np : it->second) {
                noise_mats.push_back(
                    make_noise(np->seed, dims.seq_len, checkpoint.config.d_model, np->sigma));
                override[static_cast<std::size_t>(np->slot)] = &noise_mats.back();
            }
            override_ptr = &override;
        }
        engine.loss_and_grads(run.model.params, batch.data(), dims.batch_size, override_ptr, grads);
        adamw_step(run.model, run.opt, grads, config.lr);
    }
    return run;
}

}  // namespace

DependenceMatrix run_cpdt(const ModelState<float>& checkpoint, const OptimizerState<float>& opt,
                          const CpdtConfig& config, const std::vector<CpdtExperiment>& experiments,
                          const std::vector<OutcomeProbe>& probes, const Vocab& vocab) {
    if (config.steps < 1) throw ValidationError("cpdt: steps must be >= 1");
    if (config.intensity <= 0.0 || config.intensity > 0.2) {
        throw ValidationError("cpdt: intensity must lie in (0, 0.2]");
    }
    if (experiments.size() != probes.size()) {
        throw ValidationError("cpdt: every experiment needs exactly one probe");
    }
    const int n = static_cast<int>(experiments.size());
    TokenStream stream(config.stream_seed,
                       StreamDims{config.steps, config.batch_size, checkpoint.config.seq_len},
                       vocab);
    Engine<float> engine(checkpoint.config);

    // Null run first: its outcomes are the baseline everything is compared to.
    const ContinualRun null_run = continual_run(checkpoint, opt, config, stream, {}, engine);
    std::vector<std::vector<double>> null_items(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        null_items[static_cast<std::size_t>(i)] =
            probes[static_cast<std::size_t>(i)].items(engine, null_run.model.params);
    }

    DependenceMatrix matrix;
    for (const auto& p : probes) matrix.outcome_labels.push_back(p.experiment_id);
    for (int i = 0; i < n; ++i) {
        matrix.baseline.push_back(stats::mean(null_items[static_cast<std::size_t>(i)]));
    }

    auto eval_row = [&](const ContinualRun& run) {
        std::vector<MatrixEntry> row(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            MatrixEntry& cell = row[static_cast<std::size_t>(i)];
            try {
                const auto items = probes[static_cast<std::size_t>(i)].items(engine, run.model.params);
                const auto& base = null_items[static_cast<std::size_t>(i)];
                if (items.empty() || items.size() != base.size()) {
                    cell.unsupported = true;
                    continue;
                }
                cell.item_deltas.resize(items.size());
                for (std::size_t k = 0; k < items.size(); ++k) {
                    cell.item_deltas[k] = items[k] - base[k];
                }
                cell.delta = stats::mean(cell.item_deltas);
            } catch (const Error&) {
                cell.missing = true;
            }
        }
        return row;
    };

    for (int j = 0; j < n; ++j) {
        const ContinualRun run = continual_run(checkpoint, opt, config, stream,
                                               {&experiments[static_cast<std::size_t>(j)]}, engine);
        matrix.run_labels.push_back(experiments[static_cast<std::size_t>(j)].id);
        matrix.entries.push_back(eval_row(run));
    }
    std::vector<const CpdtExperiment*> all;
    for (const auto& e : experiments) all.push_back(&e);
    const ContinualRun all_run = continual_run(checkpoint, opt, config, stream, all, engine);
    matrix.run_labels.push_back("all");
    matrix.entries.push_back(eval_row(all_run));
    return matrix;
}

void significance(DependenceMatrix& matrix, int n_bootstrap, std::uint64_t seed) {
    for (std::size_t r = 0; r < matrix.entries.size(); ++r) {
        for (std::size_t c = 0; c < matrix.entries[r].size(); ++c) {
            MatrixEntry& cell = matrix.entries[r][c];
            if (cell.missing || cell.unsupported) continue;
            cell.ci = stats::bootstrap_mean_ci(cell.item_deltas, n_bootstrap, 0.95,
                                               mix64(seed, r, c));
            cell.significant = cell.ci.lo > 0.0 || cell.ci.hi < 0.0;
        }
    }
}

DependenceMatrix benchmark_dependence(const ModelState<float>& checkpoint,
                                      const OptimizerState<float>& opt, const CpdtConfig& config,
                                      const std::vector<Benchmark>& benchmarks,
                                      const std::vector<std::string>& labels, const Vocab& vocab) {
    if (benchmarks.size() < 2) throw ValidationError("benchmark_dependence: need >= 2 benchmarks");
    if (benchmarks.size() != labels.size()) {
        throw ValidationError("benchmark_dependence: one label per benchmark");
    }
    std::vector<CpdtExperiment> experiments;
    std::vector<OutcomeProbe> probes;
    for (std::size_t b = 0; b < benchmarks.size(); ++b) {
        CpdtExperiment e;
        e.id = labels[b];
        for (int qi = 0; qi < static_cast<int>(benchmarks[b].questions.size()); ++qi) {
            // Ground-truth options, four times repeated.
            e.payloads.push_back({benchmarks[b].contamination_text(qi, vocab), 4});
        }
        experiments.push_back(std::move(e));
        const Benchmark* bench = &benchmarks[b];
        OutcomeProbe probe;
        probe.experiment_id = labels[b];
        probe.items = [bench, &vocab](Engine<float>& engine, const Params<float>& params) {
            std::vector<double> out;
            for (const auto& tier : bench->tiers()) {
                auto scores = benchmark_item_scores(engine, params, *bench, tier, vocab);
                out.insert(out.end(), scores.begin(), scores.end());
            }
            return out;
        };
        probes.push_back(std::move(probe));
    }
    DependenceMatrix matrix = run_cpdt(checkpoint, opt, config, experiments, probes, vocab);
    matrix.metadata = "benchmark dependence; contamination = ground-truth options x4";
    return matrix;
}

std::string DependenceMatrix::to_csv() const {
    std::ostringstream os;
    os << "run";
    for (const auto& label : outcome_labels) os << ',' << label;
    os << '\n';
    os.precision(10);
    os << "baseline";
    for (double b : baseline) os << ',' << b;
    os << '\n';
    for (std::size_t r = 0; r < entries.size(); ++r) {
        os << run_labels[r];
        for (const auto& cell : entries[r]) {
            os << ',';
            if (cell.missing) {
                os << "missing";
            } else if (cell.unsupported) {
                os << "unsupported";
            } else {
                os << cell.delta;
            }
        }
        os << '\n';
    }
    return os.str();
}

std::string DependenceMatrix::to_json() const {
    json j;
    j["run_labels"] = run_labels;
    j["outcome_labels"] = outcome_labels;
    j["baseline"] = baseline;
    j["metadata"] = metadata;
    j["entries"] = json::array();
    for (const auto& row : entries) {
        json jr = json::array();
        for (const auto& cell : row) {
            jr.push_back({{"delta", cell.delta},
                          {"ci_lo", cell.ci.lo},
                          {"ci_hi", cell.ci.hi},
                          {"significant", cell.significant},
                          {"missing", cell.missing},
                          {"unsupported", cell.unsupported}});
        }
        j["entries"].push_back(std::move(jr));
    }
    return j.dump(2);
}

}  // namespace pmx
