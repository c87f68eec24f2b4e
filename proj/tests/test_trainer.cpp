// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pmx/trainer.hpp"

using namespace pmx;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(std::uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.vocab_size = 512;
    cfg.seq_len = 32;
    cfg.init_seed = seed;
    return cfg;
}

struct Fixture {
    Vocab vocab = Vocab::make_default(512);
    TokenStream base;
    Schedule schedule;

    explicit Fixture(int n_steps, std::uint64_t seed = 21)
        : base(gen_base_stream(seed, n_steps, 4, 32, vocab)) {
        schedule.stream_identity = stream_identity(base);
        schedule.dims = base.dims();
    }
};

std::string fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("pmx_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

RunConfig small_run(int n_steps, const std::string& dir) {
    RunConfig cfg;
    cfg.n_steps = n_steps;
    cfg.out_dir = dir;
    cfg.checkpoint_every = n_steps;  // single final checkpoint unless overridden
    cfg.eval_every = n_steps;
    cfg.control_interval = std::max(1, n_steps / 2);
    cfg.schedule.warmup_steps = 2;
    cfg.schedule.total_steps = n_steps;
    cfg.schedule.cooldown_start = std::max(3, n_steps - 2);
    cfg.schedule.base_lr = 1e-3;
    return cfg;
}

// Inserts one marker payload every other step, exercising the dynamic channel
// and checkpointed callback state.
class InsertEveryTwo : public Callback {
public:
    std::string name() const override { return "insert_every_two"; }
    void on_step(TrainerContext& ctx) override {
        if (!ctx.mutations_enabled) return;
        if (ctx.step % 2 != 0) return;
        if (ctx.step + 1 >= ctx.config->n_steps) return;
        std::vector<Token> payload(4, static_cast<Token>(40 + count_));
        Rng rng(mix64(777, static_cast<std::uint64_t>(ctx.step), count_));
        auto entry = ctx.stream->place_dynamic(name(), TokenClass::ood, payload, ctx.step + 1,
                                               ctx.step + 2, rng);
        ctx.dynamic_ledger->entries.push_back(entry);
        ++count_;
    }
    std::string save_state() const override { return std::to_string(count_); }
    void load_state(const std::string& blob) override { count_ = std::stoi(blob); }

    int count_ = 0;
};

}  // namespace

TEST_CASE("metrics log has one row per step") {
    Fixture fx(10);
    TrainingStream ts(fx.base, fx.schedule);
    auto [model, opt] = init_model<float>(small_config());
    const std::string dir = fresh_dir("metrics_rows");
    auto result = run(ts, model, opt, small_run(10, dir), {});
    CHECK(result.steps_completed == 10);
    auto metrics = read_metrics(result.metrics_path);
    REQUIRE(metrics.size() == 10);
    for (int i = 0; i < 10; ++i) {
        CHECK(metrics[static_cast<std::size_t>(i)].step == i);
        CHECK(std::isfinite(metrics[static_cast<std::size_t>(i)].loss));
        CHECK(metrics[static_cast<std::size_t>(i)].grad_norm > 0.0);
    }
    CHECK(metrics[0].lr == 0.0);  // warmup starts at zero
}

TEST_CASE("identical runs produce byte-identical metrics") {
    Fixture fx(8);
    const std::string dir_a = fresh_dir("identical_a");
    const std::string dir_b = fresh_dir("identical_b");
    for (const std::string& dir : {dir_a, dir_b}) {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        run(ts, model, opt, small_run(8, dir), {});
    }
    CHECK(file_bytes(dir_a + "/metrics.jsonl") == file_bytes(dir_b + "/metrics.jsonl"));
}

TEST_CASE("no-op callbacks do not change metrics") {
    Fixture fx(6);
    class Noop : public Callback {
    public:
        std::string name() const override { return "noop"; }
    } noop;
    const std::string dir_a = fresh_dir("noop_a");
    const std::string dir_b = fresh_dir("noop_b");
    {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        run(ts, model, opt, small_run(6, dir_a), {});
    }
    {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        run(ts, model, opt, small_run(6, dir_b), {&noop});
    }
    CHECK(file_bytes(dir_a + "/metrics.jsonl") == file_bytes(dir_b + "/metrics.jsonl"));
}

TEST_CASE("embedding noise changes training only when mutations are enabled") {
    Fixture fx(6);
    Schedule with_noise = fx.schedule;
    with_noise.noise.push_back({0, 2, 0, 12345, 0.5});
    with_noise.noise.push_back({0, 2, 1, 12346, 0.5});

    auto run_once = [&](const Schedule& schedule, bool mutations, const std::string& dir) {
        TrainingStream ts(fx.base, schedule);
        auto [model, opt] = init_model<float>(small_config());
        RunConfig cfg = small_run(6, dir);
        cfg.mutations_enabled = mutations;
        auto result = run(ts, model, opt, cfg, {});
        return read_metrics(result.metrics_path);
    };
    auto clean = run_once(fx.schedule, true, fresh_dir("noise_clean"));
    auto noisy = run_once(with_noise, true, fresh_dir("noise_on"));
    auto control = run_once(with_noise, false, fresh_dir("noise_off"));
    CHECK(noisy[2].loss != clean[2].loss);
    CHECK(control[2].loss == clean[2].loss);
    CHECK(noisy[1].loss == clean[1].loss);  // noise applies only at its step
}

TEST_CASE("resume reproduces the uninterrupted run bit for bit") {
    const int total = 10;
    Fixture fx(total);

    // Uninterrupted reference run with dynamic insertions.
    const std::string dir_ref = fresh_dir("resume_ref");
    std::string ref_metrics, ref_ckpt;
    {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        InsertEveryTwo cb;
        RunConfig cfg = small_run(total, dir_ref);
        cfg.checkpoint_every = 4;
        auto result = run(ts, model, opt, cfg, {&cb});
        ref_metrics = file_bytes(result.metrics_path);
        ref_ckpt = file_bytes(result.final_checkpoint);
    }

    // Interrupted: the first pass dies at step 8, after the step-7 checkpoint.
    class CrashAt : public Callback {
    public:
        explicit CrashAt(int step) : crash_step_(step) {}
        std::string name() const override { return "crash"; }
        void on_step(TrainerContext& ctx) override {
            if (ctx.step == crash_step_) throw std::runtime_error("simulated kill");
        }

    private:
        int crash_step_;
    };
    const std::string dir_int = fresh_dir("resume_int");
    {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        InsertEveryTwo cb;
        CrashAt crash(8);
        RunConfig cfg = small_run(total, dir_int);
        cfg.checkpoint_every = 7;
        CHECK_THROWS_WITH(run(ts, model, opt, cfg, {&cb, &crash}), "simulated kill");
    }
    {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        InsertEveryTwo cb;
        RunConfig cfg = small_run(total, dir_int);
        cfg.checkpoint_every = 4;
        auto result = run(ts, model, opt, cfg, {&cb});
        CHECK(result.steps_completed == 3);
        CHECK(file_bytes(result.metrics_path) == ref_metrics);
        CHECK(file_bytes(result.final_checkpoint) == ref_ckpt);
    }
}

TEST_CASE("corrupt newest checkpoint falls back to an older one") {
    const int total = 9;
    Fixture fx(total);
    const std::string dir = fresh_dir("fallback");
    {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        RunConfig cfg = small_run(total, dir);
        cfg.checkpoint_every = 3;
        cfg.n_steps = 6;
        cfg.eval_every = 6;
        run(ts, model, opt, cfg, {});
    }
    // Corrupt ckpt 6; resume must fall back to ckpt 3 and still finish.
    {
        std::fstream f(dir + "/ckpt_00000006.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        f.put(char(0x5a));
    }
    const std::string dir_ref = fresh_dir("fallback_ref");
    std::string ref;
    {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        RunConfig cfg = small_run(total, dir_ref);
        cfg.checkpoint_every = 3;
        auto r = run(ts, model, opt, cfg, {});
        ref = file_bytes(r.final_checkpoint);
    }
    {
        TrainingStream ts(fx.base, fx.schedule);
        auto [model, opt] = init_model<float>(small_config());
        RunConfig cfg = small_run(total, dir);
        cfg.checkpoint_every = 3;
        auto r = run(ts, model, opt, cfg, {});
        CHECK(file_bytes(r.final_checkpoint) == ref);
    }
}

TEST_CASE("eval_batch_loss is pure and descends after a step on the batch") {
    ModelConfig cfg = small_config(7);
    auto [model, opt] = init_model<float>(cfg);
    Engine<float> engine(cfg);
    Fixture fx(4);
    std::vector<Token> batch(static_cast<std::size_t>(fx.base.dims().tokens_per_step()));
    fx.base.fill_batch(0, batch.data());

    const double l1 = eval_batch_loss(engine, model.params, batch, 4);
    const double l2 = eval_batch_loss(engine, model.params, batch, 4);
    CHECK(l1 == l2);

    Params<float> grads = Params<float>::zeros_like(cfg);
    engine.loss_and_grads(model.params, batch.data(), 4, nullptr, grads);
    adamw_step(model, opt, grads, 1e-3);
    const double l3 = eval_batch_loss(engine, model.params, batch, 4);
    CHECK(l3 < l1);

    ModelState<float> uniform = model;
    uniform.params.set_zero();
    CHECK(eval_batch_loss(engine, uniform.params, batch, 4) ==
          doctest::Approx(std::log(512.0)).epsilon(1e-6));
}

TEST_CASE("numeric failure carries step context") {
    Fixture fx(4);
    TrainingStream ts(fx.base, fx.schedule);
    auto [model, opt] = init_model<float>(small_config());
    model.params.head_w(0, 0) = std::numeric_limits<float>::quiet_NaN();
    const std::string dir = fresh_dir("numeric");
    try {
        run(ts, model, opt, small_run(4, dir), {});
        FAIL("expected NumericError");
    } catch (const NumericError& err) {
        CHECK(std::string(err.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("run config validation") {
    RunConfig cfg;
    cfg.n_steps = 0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = small_run(10, "x");
    cfg.resolve();
    cfg.eval_every = 20;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}
