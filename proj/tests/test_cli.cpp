// End-to-end runs of the simulflow binary.

#include "simulflow/train.hpp"
#include "simulflow/metrics.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <sys/wait.h>
#include <unistd.h>

using namespace simulflow;

namespace {

struct RunResult {
    int code = -1;
    std::string out;  // stdout and stderr interleaved
};

RunResult run(const std::string& args) {
    const std::string cmd = std::string(SIMULFLOW_CLI) + " " + args + " 2>&1";
    RunResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::path(SIMULFLOW_TEST_TMP) / "cli" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::map<std::string, Bytes> tree_contents(const fs::path& root) {
    std::map<std::string, Bytes> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
    }
    return out;
}

nlohmann::json parse_stdout(const std::string& out) {
    const auto start = out.find('{');
    return nlohmann::json::parse(out.substr(start));
}

// Small dataset and an initialised checkpoint shared by several tests.
struct Shared {
    fs::path data, ckpt;
    Shared() {
        const fs::path root = fresh_dir("shared_" + std::to_string(::getpid()));
        data = root / "data";
        ckpt = root / "init.sfck";
        const fs::path cfg = root / "cfg.json";
        const std::string text = R"({"model": "tiny", "seed": 3, "steps": 0})";
        write_file_atomic(cfg, Bytes(text.begin(), text.end()));
        EXPECT_EQ(run("synth --out " + q(data) + " --train 2 --val 1 --seed 5").code, 0);
        EXPECT_EQ(run("train --config " + q(cfg) + " --data " + q(data) + " --out " + q(ckpt)).code, 0);
    }
};

const Shared& shared() {
    static const Shared s;
    return s;
}

} // namespace

TEST(CliSynth, WritesTreeWithManifest) {
    const fs::path out = fresh_dir("synth_a");
    const RunResult r = run("synth --out " + q(out) + " --train 2 --val 1 --distractors 2 --seed 9");
    ASSERT_EQ(r.code, 0) << r.out;
    std::size_t seq_dirs = 0;
    for (const char* split : {"train", "val"}) {
        for (const auto& seq : sorted_entries(out / split, true)) {
            ++seq_dirs;
            EXPECT_EQ(sorted_entries(seq, false, ".ppm").size(), 8u);
            EXPECT_EQ(sorted_entries(seq, false, ".tsr").size(), 8u);
            EXPECT_EQ(sorted_entries(seq, false, ".pgm").size(), 8u);
        }
    }
    EXPECT_EQ(seq_dirs, 3u);
    const Bytes m = read_file(out / "manifest.json");
    const auto manifest = nlohmann::json::parse(m.begin(), m.end());
    ASSERT_EQ(manifest["val"].size(), 1u);
    EXPECT_EQ(manifest["val"][0]["distractors"], 2);
    EXPECT_EQ(manifest["distractors"], 2);
}

TEST(CliSynth, SameSeedGivesByteIdenticalTree) {
    const fs::path a = fresh_dir("synth_b1"), b = fresh_dir("synth_b2");
    ASSERT_EQ(run("synth --out " + q(a) + " --train 2 --val 1 --seed 4").code, 0);
    ASSERT_EQ(run("synth --out " + q(b) + " --train 2 --val 1 --seed 4").code, 0);
    const auto ta = tree_contents(a), tb = tree_contents(b);
    EXPECT_EQ(ta.size(), 3u * 8u * 3u + 1u);
    EXPECT_TRUE(ta == tb);
}

TEST(CliTrain, ZeroStepsWritesInitialisedCheckpoint) {
    const auto& s = shared();
    ASSERT_TRUE(fs::exists(s.ckpt));
    const auto entries = read_checkpoint(s.ckpt);
    ASSERT_NE(find_entry(entries, config_entry_name), nullptr);
    EXPECT_EQ(decode_model_config(*find_entry(entries, config_entry_name)).name, "tiny");
}

TEST(CliTrain, ResumesFromLastState) {
    const auto& s = shared();
    const fs::path dir = fresh_dir("train_resume");
    const fs::path cfg = dir / "cfg.json", out = dir / "model.sfck";
    const std::string text = R"({"seed": 1, "steps": 4, "batch_size": 1, "eval_every": 2})";
    write_file_atomic(cfg, Bytes(text.begin(), text.end()));
    const RunResult first = run("train --config " + q(cfg) + " --data " + q(s.data) + " --out " + q(out));
    ASSERT_EQ(first.code, 0) << first.out;
    EXPECT_NE(first.out.find("eval step 2 val J"), std::string::npos) << first.out;
    fs::path last = out;
    last += ".last";
    ASSERT_TRUE(fs::exists(last));
    const RunResult more = run("train --config " + q(cfg) + " --data " + q(s.data) + " --out " + q(out) +
                               " --resume " + q(last) + " --steps 6");
    ASSERT_EQ(more.code, 0) << more.out;
    EXPECT_NE(more.out.find("resumed at step 4"), std::string::npos) << more.out;
    EXPECT_NE(more.out.find("eval step 6"), std::string::npos) << more.out;
    EXPECT_EQ(decode_progress(*find_entry(read_checkpoint(last), train_state_entry_name)).step, 6u);
}

TEST(CliTrain, ConfigErrorsExitWithUsageCode) {
    const auto& s = shared();
    const fs::path dir = fresh_dir("train_bad");
    const fs::path cfg = dir / "cfg.json";
    const std::string text = R"({"steps": 0})";
    write_file_atomic(cfg, Bytes(text.begin(), text.end()));
    const RunResult r = run("train --config " + q(cfg) + " --data " + q(s.data) + " --out " + q(dir / "m.sfck"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("seed"), std::string::npos) << r.out;
}

TEST(CliInfer, OutputMatchesInputExtentAndIsDeterministic) {
    const auto& s = shared();
    const fs::path dir = fresh_dir("infer");
    const fs::path frame = s.data / "val" / "seq_000" / "frame_002";
    const std::string base = "infer --ckpt " + q(s.ckpt) + " --image " + q(fs::path(frame).replace_extension(".ppm")) +
                             " --flow " + q(fs::path(frame).replace_extension(".tsr"));
    const RunResult a = run(base + " --size 96 --out " + q(dir / "a.pgm") + " --prob " + q(dir / "p.pgm") +
                            " --dump-coarse " + q(dir / "coarse") + " --dump-attn " + q(dir / "attn"));
    ASSERT_EQ(a.code, 0) << a.out;
    const RunResult b = run(base + " --size 96 --out " + q(dir / "b.pgm"));
    ASSERT_EQ(b.code, 0) << b.out;
    const BinaryMask mask = read_pgm_mask(dir / "a.pgm");
    EXPECT_EQ(mask.height(), 64u);
    EXPECT_EQ(mask.width(), 64u);
    EXPECT_EQ(read_file(dir / "a.pgm"), read_file(dir / "b.pgm"));
    EXPECT_EQ(read_pgm_gray(dir / "p.pgm").shape(), (Shape{64, 64}));

    const std::size_t grids[] = {24, 12, 6, 3};
    for (std::size_t i = 0; i < 4; ++i) {
        const fs::path c = dir / "coarse" / ("coarse_s" + std::to_string(i + 1) + ".pgm");
        ASSERT_TRUE(fs::exists(c)) << c;
        EXPECT_EQ(read_pgm_gray(c).shape(), (Shape{grids[i], grids[i]}));
        const Tensor attn = read_tsr(dir / "attn" / ("attn_s" + std::to_string(i + 1) + ".tsr"));
        EXPECT_EQ(attn.rank(), 3u);
        EXPECT_EQ(attn.dim(0), 2u);
    }
}

TEST(CliInfer, RejectsSizeNotMultipleOf32) {
    const auto& s = shared();
    const fs::path frame = s.data / "val" / "seq_000" / "frame_000";
    const RunResult r = run("infer --ckpt " + q(s.ckpt) + " --image " + q(fs::path(frame).replace_extension(".ppm")) +
                            " --flow " + q(fs::path(frame).replace_extension(".tsr")) + " --size 48 --out " +
                            q(fresh_dir("infer_bad") / "m.pgm"));
    EXPECT_EQ(r.code, 2) << r.out;
    EXPECT_NE(r.out.find("32"), std::string::npos) << r.out;
}

TEST(CliEval, IdenticalTreesScoreOne) {
    const auto& s = shared();
    const RunResult r = run("eval --pred " + q(s.data / "val") + " --gt " + q(s.data / "val") + " --csv " +
                            q(fresh_dir("eval_same") / "eval.csv"));
    ASSERT_EQ(r.code, 0) << r.out;
    const auto j = parse_stdout(r.out);
    EXPECT_DOUBLE_EQ(j["global"]["J"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(j["global"]["F"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(j["global"]["G"].get<double>(), 1.0);
    EXPECT_EQ(j["global"]["frames"], 8);
}

TEST(CliEval, EmptyPredictionsScoreZero) {
    const auto& s = shared();
    const fs::path pred = fresh_dir("eval_empty");
    for (const auto& e : fs::recursive_directory_iterator(s.data / "val")) {
        if (e.path().extension() != ".pgm") continue;
        const BinaryMask gt = read_pgm_mask(e.path());
        write_pgm_mask(pred / fs::relative(e.path(), s.data / "val"), BinaryMask(gt.height(), gt.width()));
    }
    const RunResult r = run("eval --pred " + q(pred) + " --gt " + q(s.data / "val"));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_DOUBLE_EQ(parse_stdout(r.out)["global"]["J"].get<double>(), 0.0);
    EXPECT_TRUE(fs::exists(pred / "eval.csv"));
}

TEST(CliEval, ShiftedPairMatchesMetricOracles) {
    const fs::path root = fresh_dir("eval_shift");
    BinaryMask gt(32, 32), pred(32, 32);
    for (std::size_t y = 8; y < 20; ++y)
        for (std::size_t x = 10; x < 22; ++x) {
            gt.set(y, x, true);
            pred.set(y, x + 1, true);
        }
    write_pgm_mask(root / "gt" / "s" / "f.pgm", gt);
    write_pgm_mask(root / "pred" / "s" / "f.pgm", pred);
    std::vector<float> prob(pred.values().begin(), pred.values().end());
    write_pgm_gray(root / "prob" / "s" / "f.pgm", 32, 32, prob);
    const RunResult r = run("eval --pred " + q(root / "pred") + " --gt " + q(root / "gt") + " --prob " +
                            q(root / "prob") + " --tol 0");
    ASSERT_EQ(r.code, 0) << r.out;
    const auto j = parse_stdout(r.out)["sequences"][0];
    EXPECT_EQ(j["name"], "s");
    EXPECT_NEAR(j["J"].get<double>(), 132.0 / 156.0, 1e-12);
    EXPECT_NEAR(j["J"].get<double>(), region_similarity(pred, gt), 1e-12);
    EXPECT_NEAR(j["F"].get<double>(), boundary_f(pred, gt, 0), 1e-12);
    EXPECT_NEAR(j["MAE"].get<double>(), 24.0 / 1024.0, 1e-12);
    EXPECT_NEAR(j["F_beta_max"].get<double>(), f_beta_max(prob, gt), 1e-12);
}

TEST(CliEval, MissingCounterpartIsListed) {
    const fs::path root = fresh_dir("eval_missing");
    write_pgm_mask(root / "gt" / "s" / "a.pgm", BinaryMask(4, 4));
    write_pgm_mask(root / "gt" / "s" / "b.pgm", BinaryMask(4, 4));
    write_pgm_mask(root / "pred" / "s" / "a.pgm", BinaryMask(4, 4));
    const RunResult r = run("eval --pred " + q(root / "pred") + " --gt " + q(root / "gt"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("b.pgm"), std::string::npos) << r.out;
}

TEST(CliCheck, FreshBuildPassesAndInjectedFaultIsNamed) {
    const RunResult ok = run("check --suite all");
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_NE(ok.out.find("all checks passed"), std::string::npos);
    const RunResult bad = run("check --suite invariants --inject-fault binarize.tie");
    EXPECT_EQ(bad.code, 1) << bad.out;
    EXPECT_NE(bad.out.find("FAIL binarize.tie"), std::string::npos) << bad.out;
}

TEST(CliParams, PrintsPresetCounts) {
    const RunResult r = run("params --model tiny");
    ASSERT_EQ(r.code, 0);
    const std::string count = r.out.substr(r.out.find(' ') + 1);
    EXPECT_GT(std::stoul(count), 100000u);
}

TEST(CliUsage, BadInvocationsExitWithTwo) {
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("synth").code, 2);
    EXPECT_EQ(run("check --suite everything").code, 2);
    EXPECT_EQ(run("--help").code, 0);
}
