// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace pmx {

namespace fs = std::filesystem;
using nlohmann::json;

void RunConfig::resolve() {
    if (checkpoint_every == 0) checkpoint_every = std::max(500, n_steps / 20);
    if (control_interval == 0) control_interval = std::max(1, n_steps / 100);
    if (eval_every == 0) eval_every = std::max(1, n_steps / 20);
}

void RunConfig::validate() const {
    if (n_steps <= 0) throw ValidationError("run config: n_steps must be positive");
    for (int v : {eval_every, checkpoint_every, control_interval}) {
        if (v < 1 || v > n_steps) {
            throw ValidationError("run config: intervals must lie in [1, n_steps]");
        }
    }
    schedule.validate();
}

namespace {

std::string metrics_line(const StepMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"step\":%d,\"loss\":%.10g,\"grad_norm\":%.10g,\"lr\":%.10g,"
                  "\"pnorm_input\":%.10g,\"pnorm_hidden\":%.10g,\"pnorm_output\":%.10g}\n",
                  m.step, m.loss, m.grad_norm, m.lr, m.pnorm_input, m.pnorm_hidden,
                  m.pnorm_output);
    return buf;
}

std::string checkpoint_name(std::int64_t step) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "ckpt_%08lld.bin", static_cast<long long>(step));
    return buf;
}

double grads_l2(const Params<float>& grads) {
    double acc = 0.0;
    grads.for_each([&](const std::string&, const float* data, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            acc += static_cast<double>(data[i]) * static_cast<double>(data[i]);
        }
    });
    return std::sqrt(acc);
}

json ledger_to_json(const InterventionLedger& ledger) {
    json rows = json::array();
    for (const auto& e : ledger.entries) {
        rows.push_back({e.experiment_id, e.step, e.slot, e.offset, e.length, to_string(e.cls),
                        e.payload, e.identical});
    }
    return rows;
}

InterventionLedger ledger_from_json(const json& rows) {
    InterventionLedger ledger;
    for (const auto& r : rows) {
        ledger.entries.push_back({r[0].get<std::string>(), r[1].get<int>(), r[2].get<int>(),
                                  r[3].get<int>(), r[4].get<int>(),
                                  token_class_from_string(r[5].get<std::string>()),
                                  r[6].get<std::uint32_t>(), r[7].get<int>()});
    }
    return ledger;
}

// Finds the newest checkpoint that loads and CRC-verifies.
std::int64_t find_resume_checkpoint(const std::string& dir, ModelState<float>& model,
                                    OptimizerState<float>& opt, CheckpointExtra& extra) {
    std::vector<std::pair<std::int64_t, std::string>> candidates;
    if (!fs::exists(dir)) return -1;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("ckpt_", 0) == 0 && name.size() >= 9 &&
            name.compare(name.size() - 4, 4, ".bin") == 0) {
            try {
                candidates.emplace_back(std::stoll(name.substr(5, name.size() - 9)),
                                        entry.path().string());
            } catch (const std::exception&) {
            }
        }
    }
    std::sort(candidates.rbegin(), candidates.rend());
    for (const auto& [step, path] : candidates) {
        try {
            if (load_checkpoint_file(path, model, opt, extra)) return step;
        } catch (const Error&) {
            // Corrupt or partial file; fall back to the previous one.
        }
    }
    return -1;
}

}  // namespace

void truncate_step_file(const std::string& path, int resume_step) {
    std::ifstream in(path);
    if (!in) return;
    std::ostringstream keep;
    std::string line;
    while (std::getline(in, line)) {
        const auto pos = line.find("step");
        bool drop = false;
        if (pos != std::string::npos) {
            std::size_t at = pos + 4;
            while (at < line.size() && (line[at] == '"' || line[at] == ':' || line[at] == ' ' ||
                                        line[at] == ',')) {
                ++at;
            }
            if (at < line.size() && (std::isdigit(line[at]) || line[at] == '-')) {
                drop = std::atoi(line.c_str() + at) >= resume_step;
            }
        }
        if (!drop) keep << line << '\n';
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    out << keep.str();
}

std::vector<StepMetrics> read_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("metrics file not found: " + path);
    std::vector<StepMetrics> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        StepMetrics m;
        m.step = j.at("step").get<int>();
        m.loss = j.at("loss").get<double>();
        m.grad_norm = j.at("grad_norm").get<double>();
        m.lr = j.at("lr").get<double>();
        m.pnorm_input = j.at("pnorm_input").get<double>();
        m.pnorm_hidden = j.at("pnorm_hidden").get<double>();
        m.pnorm_output = j.at("pnorm_output").get<double>();
        out.push_back(m);
    }
    return out;
}

double eval_batch_loss(Engine<float>& engine, const Params<float>& params,
                       const std::vector<Token>& batch, int batch_size) {
    return engine.batch_loss(params, batch.data(), batch_size);
}

RunResult run(TrainingStream& stream, ModelState<float>& model, OptimizerState<float>& opt,
              const RunConfig& config_in, const std::vector<Callback*>& callbacks) {
    RunConfig config = config_in;
    config.resolve();
    config.validate();
    const StreamDims dims = stream.dims();
    if (config.n_steps > dims.n_steps) {
        throw ValidationError("run config: n_steps exceeds the stream length");
    }
    if (dims.seq_len != model.config.seq_len) {
        throw ValidationError("run: stream seq_len does not match the model");
    }
    fs::create_directories(config.out_dir);
    const std::string metrics_path = (fs::path(config.out_dir) / "metrics.jsonl").string();

    Engine<float> engine(model.config);
    Params<float> grads = Params<float>::zeros_like(model.config);
    Rng dyn_rng(mix64(0x64796e, stream.base().seed()));
    InterventionLedger dynamic_ledger;

    TrainerContext ctx;
    ctx.config = &config;
    ctx.model = &model;
    ctx.opt = &opt;
    ctx.engine = &engine;
    ctx.stream = &stream;
    ctx.dyn_rng = &dyn_rng;
    ctx.dynamic_ledger = &dynamic_ledger;
    ctx.mutations_enabled = config.mutations_enabled;

    // Noise placements by step (ignored entirely on control runs).
    std::map<int, std::vector<const NoisePlacement*>> noise_by_step;
    std::vector<WatermarkRecord> wm_records;
    if (config.mutations_enabled) {
        for (const auto& n : stream.schedule().noise) {
            noise_by_step[n.step].push_back(&n);
            wm_records.push_back({n.step, n.slot, n.seed, n.sigma});
        }
    }

    // Resume from the newest valid checkpoint, restoring overlay, dynamic
    // ledger, RNG and callback state.
    std::int64_t start_step = 0;
    {
        ModelState<float> candidate;
        OptimizerState<float> candidate_opt;
        CheckpointExtra extra;
        const std::int64_t found = find_resume_checkpoint(config.out_dir, candidate, candidate_opt, extra);
        if (found > 0) {
            if (candidate.config != model.config) {
                throw ValidationError("resume: checkpoint config mismatch");
            }
            model = std::move(candidate);
            opt = std::move(candidate_opt);
            dyn_rng.set_state(extra.rng_state);
            const json blob = json::parse(extra.blob);
            if (blob.contains("overlay")) stream.load_overlay(blob["overlay"].get<std::string>());
            if (blob.contains("ledger")) dynamic_ledger = ledger_from_json(blob["ledger"]);
            for (Callback* cb : callbacks) {
                const std::string key = cb->name();
                if (blob.contains("callbacks") && blob["callbacks"].contains(key)) {
                    cb->load_state(blob["callbacks"][key].get<std::string>());
                }
            }
            start_step = found;
            truncate_step_file(metrics_path, static_cast<int>(start_step));
            ctx.step = static_cast<int>(start_step) - 1;
            for (Callback* cb : callbacks) cb->on_resume(ctx);
        }
    }

    auto write_checkpoint = [&]() {
        CheckpointExtra extra;
        extra.rng_state = dyn_rng.state();
        json blob;
        std::string overlay;
        stream.save_overlay(overlay);
        blob["overlay"] = overlay;
        blob["ledger"] = ledger_to_json(dynamic_ledger);
        blob["callbacks"] = json::object();
        for (Callback* cb : callbacks) {
            const std::string state = cb->save_state();
            if (!state.empty()) blob["callbacks"][cb->name()] = state;
        }
        extra.blob = blob.dump();
        const std::string path =
            (fs::path(config.out_dir) / checkpoint_name(model.step)).string();
        save_checkpoint_file(path, model, opt, extra);
        return path;
    };

    if (start_step == 0) {
        ctx.step = -1;
        for (Callback* cb : callbacks) cb->on_start(ctx);
    }

    std::ofstream metrics_out(metrics_path, start_step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics_out) throw MissingInputError("cannot open metrics file: " + metrics_path);

    std::vector<Token> batch(static_cast<std::size_t>(dims.tokens_per_step()));
    std::vector<Mat<float>> noise_mats;
    RunResult result;
    result.watermark_records = wm_records;
    result.metrics_path = metrics_path;

    double last_loss = 0.0;
    std::string last_ckpt;
    for (int step = static_cast<int>(start_step); step < config.n_steps; ++step) {
        stream.fill_batch(step, batch.data());

        EmbeddingOverride<float> override;
        const EmbeddingOverride<float>* override_ptr = nullptr;
        auto it = noise_by_step.find(step);
        if (it != noise_by_step.end()) {
            override.assign(static_cast<std::size_t>(dims.batch_size), nullptr);
            noise_mats.clear();
            noise_mats.reserve(it->second.size());
            for (const NoisePlacement* np : it->second) {
                noise_mats.push_back(make_noise(np->seed, dims.seq_len, model.config.d_model, np->sigma));
                override[static_cast<std::size_t>(np->slot)] = &noise_mats.back();
            }
            override_ptr = &override;
        }

        double loss;
        try {
            loss = engine.loss_and_grads(model.params, batch.data(), dims.batch_size, override_ptr,
                                         grads);
        } catch (const NumericError& err) {
            throw NumericError(std::string(err.what()) + " at step " + std::to_string(step));
        }
        const double lr = lr_at(config.schedule, step);
        adamw_step(model, opt, grads, lr);
        last_loss = loss;

        StepMetrics m;
        m.step = step;
        m.loss = loss;
        m.grad_norm = grads_l2(grads);
        m.lr = lr;
        m.pnorm_input = params_l2(model.params, "input");
        m.pnorm_hidden = params_l2(model.params, "hidden");
        m.pnorm_output = params_l2(model.params, "output");
        metrics_out << metrics_line(m);
        metrics_out.flush();

        ctx.step = step;
        for (Callback* cb : callbacks) cb->on_step(ctx);

        if ((step + 1) % config.checkpoint_every == 0 || step + 1 == config.n_steps) {
            last_ckpt = write_checkpoint();
        }
    }

    result.steps_completed = config.n_steps - static_cast<int>(start_step);
    result.final_loss = last_loss;
    result.final_checkpoint =
        !last_ckpt.empty() ? last_ckpt
                           : (fs::path(config.out_dir) / checkpoint_name(config.n_steps)).string();
    return result;
}

}  // namespace pmx
