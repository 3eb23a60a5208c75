#include "simulflow/config.hpp"

#include <gtest/gtest.h>

using namespace simulflow;

namespace {

Dataset small_dataset(std::size_t n, std::uint64_t seed) {
    SceneOptions opt;
    opt.length = 4;
    std::vector<SceneSpec> specs;
    for (std::size_t i = 0; i < n; ++i) specs.push_back(random_scene(seed + i, opt));
    return dataset_from_specs(specs);
}

std::vector<std::vector<float>> snapshot(const ParamRegistry& reg) {
    std::vector<std::vector<float>> out;
    for (const auto& [name, t] : reg) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

} // namespace

TEST(PolyLr, ScheduleValues) {
    EXPECT_DOUBLE_EQ(poly_lr(3e-4, 0, 100), 3e-4);
    EXPECT_NEAR(poly_lr(3e-4, 50, 100), 3e-4 * std::pow(0.5, 0.9), 1e-15);
    EXPECT_DOUBLE_EQ(poly_lr(3e-4, 100, 100), 0.0);
    EXPECT_DOUBLE_EQ(poly_lr(1.0, 3, 4, 1.0), 0.25);
    double prev = 1.0;
    for (std::size_t s = 1; s < 100; ++s) {
        const double lr = poly_lr(1.0, s, 100);
        EXPECT_LT(lr, prev);
        prev = lr;
    }
}

TEST(AdamW, MatchesScalarOracle) {
    ParamRegistry reg;
    Tensor w = reg.add("w", Tensor::from({2}, {1.0f, -2.0f}));
    AdamW opt(reg);
    opt.weight_decay = 0.1;
    double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
    const double lr = 0.05, b1 = 0.9, b2 = 0.999;
    for (int t = 1; t <= 5; ++t) {
        // loss = sum(w^3) so the gradient changes with the iterate
        reg.zero_grad();
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.backward(sum(mul(mul(w, w), w)));
        }
        opt.step(reg, lr);
        for (int i = 0; i < 2; ++i) {
            const double g = 3 * x[i] * x[i];
            m[i] = b1 * m[i] + (1 - b1) * g;
            v[i] = b2 * v[i] + (1 - b2) * g * g;
            x[i] -= lr * 0.1 * x[i];
            x[i] -= lr * (m[i] / (1 - std::pow(b1, t))) / (std::sqrt(v[i] / (1 - std::pow(b2, t))) + 1e-8);
        }
        EXPECT_NEAR(w.data()[0], x[0], 1e-5) << "step " << t;
        EXPECT_NEAR(w.data()[1], x[1], 1e-5) << "step " << t;
    }
    EXPECT_EQ(opt.steps(), 5u);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
    const Model model(model_preset("tiny"), 1);
    const Dataset data = small_dataset(1, 3);
    AdamW opt(model.params());
    const auto before = snapshot(model.params());
    const auto batch = select_batch(data, 2, 0, 0);
    const StepStats stats = train_step(model, batch, opt, 0.0);
    EXPECT_GT(stats.total, 0.0);
    EXPECT_EQ(snapshot(model.params()), before);
    // the moments still advanced
    double moment = 0;
    for (double m : opt.first_moment(0)) moment += std::abs(m);
    EXPECT_GT(moment, 0.0);
    EXPECT_EQ(opt.steps(), 1u);
}

TEST(TrainStep, BatchLossIsMeanOfSampleLosses) {
    const Model model(model_preset("tiny"), 2);
    const Dataset data = small_dataset(2, 5);
    AdamW opt(model.params());
    const std::vector<const Sample*> batch = {&data.sequences[0][0], &data.sequences[1][2]};
    double expect = 0;
    for (const Sample* s : batch) {
        const auto out = model(s->image, s->flow_rgb);
        expect += segmentation_loss(out.logits, out.pyramid.coarse_masks, s->gt, 0.1).total_value();
    }
    EXPECT_NEAR(train_step(model, batch, opt, 0.0).total, expect / 2, 1e-5);
    EXPECT_THROW(train_step(model, std::span<const Sample* const>{}, opt, 0.0), ConfigError);
}

TEST(TrainStep, OverfitsSingleSample) {
    const Model model(model_preset("tiny"), 1);
    const Dataset data = small_dataset(1, 11);
    AdamW opt(model.params());
    const std::vector<const Sample*> batch = {&data.sequences[0][0]};
    double first = 0, last = 0;
    for (std::size_t step = 0; step < 200; ++step) {
        last = train_step(model, batch, opt, 1e-3).main;
        if (step == 0) first = last;
    }
    EXPECT_LT(last, first);
    EXPECT_LT(last, 0.05);
}

TEST(SelectBatch, DependsOnlyOnSeedAndStep) {
    const Dataset data = small_dataset(5, 1);
    EXPECT_EQ(select_batch(data, 4, 7, 13), select_batch(data, 4, 7, 13));
    EXPECT_NE(select_batch(data, 4, 7, 13), select_batch(data, 4, 7, 14));
    EXPECT_NE(select_batch(data, 4, 7, 13), select_batch(data, 4, 8, 13));
    std::set<const Sample*> seen;
    for (std::size_t s = 0; s < 50; ++s)
        for (const Sample* p : select_batch(data, 4, 1, s)) seen.insert(p);
    EXPECT_GT(seen.size(), 15u);
}

TEST(Train, ResumeContinuesTheSameTrajectory) {
    const Dataset data = small_dataset(3, 21);
    TrainOptions opts;
    opts.steps = 6;
    opts.batch_size = 2;
    opts.lr = 1e-3;
    opts.seed = 4;
    opts.eval_every = 3;

    std::vector<double> straight;
    const Model a(model_preset("tiny"), 1);
    AdamW opt_a(a.params());
    TrainHooks log_a;
    log_a.on_step = [&](std::size_t, double, const StepStats& s) { straight.push_back(s.total); };
    train(a, opt_a, data, nullptr, opts, {}, log_a);

    // interrupted after 3 steps, restored from a checkpoint file
    const fs::path ckpt = fs::path(SIMULFLOW_TEST_TMP) / "resume.sfck";
    fs::create_directories(ckpt.parent_path());
    {
        const Model b(model_preset("tiny"), 1);
        AdamW opt_b(b.params());
        TrainOptions first = opts;
        first.steps = 6;
        TrainHooks stop;
        bool saved = false;
        stop.on_checkpoint = [&](const TrainProgress& p) {
            if (saved) return;
            NamedTensors meta = opt_b.state_entries();
            meta.emplace_back(train_state_entry_name, encode_progress(p));
            save_checkpoint(ckpt, b.params(), meta);
            saved = true;
        };
        train(b, opt_b, data, nullptr, first, {}, stop);
    }
    const Model c(model_preset("tiny"), 99);
    AdamW opt_c(c.params());
    const auto meta = load_checkpoint(ckpt, c.params());
    opt_c.load_state(meta);
    const TrainProgress progress = decode_progress(*find_entry(meta, train_state_entry_name));
    EXPECT_EQ(progress.step, 3u);
    std::vector<double> resumed;
    TrainHooks log_c;
    log_c.on_step = [&](std::size_t, double, const StepStats& s) { resumed.push_back(s.total); };
    train(c, opt_c, data, nullptr, opts, progress, log_c);

    ASSERT_EQ(resumed.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(resumed[i], straight[3 + i], 1e-4 * straight[3 + i]) << i;
    double worst = 0;
    for (const auto& [name, t] : a.params()) {
        const auto other = c.params().get(name).data();
        for (std::size_t i = 0; i < t.numel(); ++i) worst = std::max(worst, double(std::abs(t.data()[i] - other[i])));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Train, HooksFireAtBoundaries) {
    const Dataset data = small_dataset(2, 31);
    TrainOptions opts;
    opts.steps = 5;
    opts.batch_size = 1;
    opts.eval_every = 2;
    const Model m(model_preset("tiny"), 1);
    AdamW opt(m.params());
    std::vector<std::size_t> evals, checkpoints;
    TrainHooks hooks;
    hooks.on_eval = [&](std::size_t step, const SplitScore& s) {
        evals.push_back(step);
        EXPECT_GE(s.j, 0.0);
        EXPECT_LE(s.j, 1.0);
    };
    hooks.on_checkpoint = [&](const TrainProgress& p) { checkpoints.push_back(p.step); };
    const TrainProgress p = train(m, opt, data, &data, opts, {}, hooks);
    EXPECT_EQ(evals, (std::vector<std::size_t>{2, 4, 5}));
    EXPECT_EQ(checkpoints, evals);
    EXPECT_EQ(p.step, 5u);
    EXPECT_GE(p.best_j, 0.0);
}

TEST(Train, ProgressEncodingRoundTrip) {
    const TrainProgress p{250, 0.75, 200};
    const TrainProgress q = decode_progress(encode_progress(p));
    EXPECT_EQ(q.step, 250u);
    EXPECT_NEAR(q.best_j, 0.75, 1e-7);
    EXPECT_EQ(q.best_step, 200u);
    EXPECT_THROW(decode_progress(Tensor::zeros({2})), FormatError);
}

TEST(RunConfig, DefaultsAndOverrides) {
    const auto rc = parse_run_config(nlohmann::json::parse(R"({"seed": 3, "lr": 1e-3, "depths": [1, 1, 2, 1],
                                                               "mask_mode": "hard", "data": "/tmp/d"})"));
    EXPECT_EQ(rc.train.seed, 3u);
    EXPECT_DOUBLE_EQ(rc.train.lr, 1e-3);
    EXPECT_EQ(rc.train.steps, 2000u);
    EXPECT_EQ(rc.train.batch_size, 4u);
    EXPECT_DOUBLE_EQ(rc.train.power, 0.9);
    EXPECT_EQ(rc.model.name, "tiny");
    EXPECT_EQ(rc.model.depths, (PerStage<std::size_t>{1, 1, 2, 1}));
    EXPECT_EQ(rc.model.mask_mode, MaskMode::hard);
    EXPECT_EQ(rc.data, "/tmp/d");
}

TEST(RunConfig, RejectsUnknownKeysAndMissingSeed) {
    EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"seed": 1, "learning_rate": 0.1})")), ConfigError);
    EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"lr": 0.1})")), ConfigError);
    EXPECT_NO_THROW(parse_run_config(nlohmann::json::parse(R"({"lr": 0.1})"), false));
    EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"seed": 1, "depths": [1, 1]})")), ConfigError);
    EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"seed": 1, "lr": "fast"})")), ConfigError);
    EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"seed": 1, "height": 100})")), ConfigError);
    EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"([1, 2])")), ConfigError);
}
