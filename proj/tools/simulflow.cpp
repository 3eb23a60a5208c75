// simulflow command-line tool: synth, train, infer, eval, check, params.
//
// Exit codes: 0 success, 1 check or evaluation failure, 2 usage or I/O error.

#include "simulflow/simulflow.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <map>

namespace sf = simulflow;
using nlohmann::json;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_failure = 1;
constexpr int exit_usage = 2;

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_text(const sf::fs::path& path, const std::string& text) {
    sf::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    std::string out;
    std::size_t n_train = 200;
    std::size_t n_val = 40;
    std::size_t size = 64;
    std::size_t distractors = 2;
    double noise = 0.5;
    std::size_t length = 8;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
    sf::SynthOptions opt;
    opt.n_train = a.n_train;
    opt.n_val = a.n_val;
    opt.seed = a.seed;
    opt.scene.size = a.size;
    opt.scene.distractors = a.distractors;
    opt.scene.flow_noise_std = a.noise;
    opt.scene.length = a.length;
    sf::write_dataset(a.out, opt);
    std::cerr << "wrote " << a.n_train << " train and " << a.n_val << " val sequences to " << a.out << "\n";
    return exit_ok;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::string resume;
    std::optional<std::size_t> steps;
    std::optional<std::uint64_t> seed;
    std::size_t log_every = 50;
};

sf::NamedTensors state_meta(const sf::Model& model, const sf::AdamW& opt, const sf::TrainProgress& progress) {
    sf::NamedTensors meta{{sf::config_entry_name, sf::encode_model_config(model.config())},
                          {sf::train_state_entry_name, sf::encode_progress(progress)}};
    for (auto& e : opt.state_entries()) meta.push_back(std::move(e));
    return meta;
}

int cmd_train(const TrainArgs& a) {
    json doc;
    {
        const sf::Bytes bytes = sf::read_file(a.config);
        try {
            doc = json::parse(bytes.begin(), bytes.end());
        } catch (const json::parse_error& e) {
            throw sf::ConfigError(a.config + " is not valid JSON: " + e.what());
        }
    }
    if (a.seed) doc["seed"] = *a.seed;
    if (a.steps) doc["steps"] = *a.steps;
    const sf::RunConfig rc = sf::parse_run_config(doc, true);

    std::string data_root = a.data;
    if (data_root.empty() && rc.data) data_root = *rc.data;
    if (data_root.empty()) throw sf::ConfigError("no dataset given (--data or \"data\" in the config)");

    const sf::Model model(rc.model, rc.train.seed);
    sf::AdamW opt(model.params());
    sf::TrainProgress progress;
    if (!a.resume.empty()) {
        const auto meta = sf::load_checkpoint(a.resume, model.params());
        const sf::Tensor* cfg = sf::find_entry(meta, sf::config_entry_name);
        const sf::Tensor* state = sf::find_entry(meta, sf::train_state_entry_name);
        if (cfg == nullptr || state == nullptr) {
            throw sf::FormatError(sf::FormatError::Kind::name_mismatch, a.resume + " is not a resumable training state");
        }
        if (!sf::detail::bitwise_equal(*cfg, sf::encode_model_config(rc.model))) {
            throw sf::ConfigError("resume: model configuration differs from the checkpoint");
        }
        opt.load_state(meta);
        progress = sf::decode_progress(*state);
        std::cerr << "resumed at step " << progress.step << "\n";
    }

    const sf::fs::path out = a.out;
    sf::fs::path last = out;
    last += ".last";
    const sf::NamedTensors cfg_meta{{sf::config_entry_name, sf::encode_model_config(model.config())}};

    if (rc.train.steps == 0 || progress.step >= rc.train.steps) {
        sf::save_checkpoint(out, model.params(), cfg_meta);
        std::cerr << "no steps to run; wrote " << out << "\n";
        return exit_ok;
    }

    const sf::Dataset train_set = sf::load_split(data_root, "train");
    std::optional<sf::Dataset> val_set;
    if (sf::fs::is_directory(sf::fs::path(data_root) / "val")) val_set = sf::load_split(data_root, "val");
    std::cerr << "train: " << train_set.sequences.size() << " sequences, " << train_set.frames() << " frames";
    if (val_set) std::cerr << "; val: " << val_set->sequences.size() << " sequences";
    std::cerr << "\n";

    bool saved_best = progress.best_j >= 0 && sf::fs::exists(out);
    sf::TrainHooks hooks;
    hooks.on_step = [&](std::size_t step, double lr, const sf::StepStats& s) {
        if (a.log_every == 0 || step % a.log_every != 0) return;
        std::fprintf(stderr, "step %zu lr %.3e loss %.5f ce %.5f bce %.4f %.4f %.4f %.4f\n", step, lr, s.total,
                     s.main, s.aux[0], s.aux[1], s.aux[2], s.aux[3]);
    };
    hooks.on_eval = [&](std::size_t step, const sf::SplitScore& s) {
        std::fprintf(stderr, "eval step %zu val J %.4f F %.4f\n", step, s.j, s.f);
    };
    hooks.on_best = [&](const sf::TrainProgress& p) {
        sf::save_checkpoint(out, model.params(), cfg_meta);
        saved_best = true;
        std::fprintf(stderr, "best val J %.4f at step %zu -> %s\n", p.best_j, p.best_step, out.c_str());
    };
    hooks.on_checkpoint = [&](const sf::TrainProgress& p) {
        sf::save_checkpoint(last, model.params(), state_meta(model, opt, p));
    };
    progress = sf::train(model, opt, train_set, val_set ? &*val_set : nullptr, rc.train, progress, hooks);
    if (!saved_best) sf::save_checkpoint(out, model.params(), cfg_meta);
    return exit_ok;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
    std::string ckpt;
    std::string image;
    std::string flow;
    std::string out;
    std::string prob;
    std::size_t size = 512;
    std::string dump_coarse;
    std::string dump_attn;
};

int cmd_infer(const InferArgs& a) {
    if (a.size == 0 || a.size % 32 != 0) {
        throw sf::ConfigError("--size " + std::to_string(a.size) + " is not a positive multiple of 32");
    }
    const auto entries = sf::read_checkpoint(a.ckpt);
    const sf::Tensor* cfg_entry = sf::find_entry(entries, sf::config_entry_name);
    if (cfg_entry == nullptr) {
        throw sf::FormatError(sf::FormatError::Kind::name_mismatch, a.ckpt + " has no embedded model configuration");
    }
    sf::ModelConfig cfg = sf::decode_model_config(*cfg_entry);
    cfg.height = cfg.width = a.size;
    const sf::Model model(cfg, 0);
    sf::restore_parameters(model.params(), entries);

    const sf::Tensor image = sf::read_ppm(a.image);
    const sf::Tensor flow = sf::read_tsr(a.flow);
    const std::size_t h = image.dim(1), w = image.dim(2);
    if (flow.shape() != sf::Shape{2, h, w}) {
        throw sf::ShapeError("flow " + sf::shape_str(flow.shape()) + " does not match image " + std::to_string(h) +
                             "x" + std::to_string(w));
    }
    // displacements are in pixels, so they scale with the resize
    sf::Tensor flow_r = sf::bilinear_resize(flow, a.size, a.size);
    {
        auto v = flow_r.mutable_data();
        const std::size_t n = a.size * a.size;
        const float sx = static_cast<float>(a.size) / static_cast<float>(w);
        const float sy = static_cast<float>(a.size) / static_cast<float>(h);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] *= sx;
            v[n + i] *= sy;
        }
    }
    sf::EncoderTrace trace;
    const auto result = model(sf::bilinear_resize(image, a.size, a.size), sf::flow_to_rgb(flow_r),
                              a.dump_attn.empty() ? nullptr : &trace);
    const sf::BinaryMask mask = sf::resize_nearest(sf::binarize(result.logits), h, w);
    sf::write_pgm_mask(a.out, mask);

    if (!a.prob.empty()) {
        const auto prob = sf::foreground_probability(result.logits);
        sf::Tensor p({1, a.size, a.size}, std::vector<float>(prob.begin(), prob.end()));
        const sf::Tensor back = sf::bilinear_resize(p, h, w);
        sf::write_pgm_gray(a.prob, h, w, back.data());
    }
    if (!a.dump_coarse.empty()) {
        for (std::size_t i = 0; i < sf::num_stages; ++i) {
            const sf::Tensor& s = result.pyramid.coarse_masks[i];
            std::vector<float> v(s.numel());
            for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(sf::sigmoid_scalar(double(s.data()[k])));
            sf::write_pgm_gray(sf::fs::path(a.dump_coarse) / ("coarse_s" + std::to_string(i + 1) + ".pgm"), s.dim(0),
                               s.dim(1), v);
        }
    }
    if (!a.dump_attn.empty()) {
        for (std::size_t i = 0; i < sf::num_stages; ++i) {
            const auto& t = trace[i];
            if (t.count == 0) continue;
            std::vector<float> v(t.key_weights.size());
            for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(t.key_weights[k] / double(t.count));
            sf::write_tsr(sf::fs::path(a.dump_attn) / ("attn_s" + std::to_string(i + 1) + ".tsr"),
                          sf::Tensor({t.key_blocks, t.key_h, t.key_w}, std::move(v)));
        }
    }
    return exit_ok;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string pred;
    std::string gt;
    std::string prob;
    std::string csv;
    std::optional<std::size_t> tol;
};

json report_json(const sf::SequenceReport& r, std::size_t frames) {
    json j = {{"name", r.name}, {"frames", frames}, {"J", r.j}, {"F", r.f}, {"G", r.g}};
    if (r.mae) j["MAE"] = *r.mae;
    if (r.f_beta_max) j["F_beta_max"] = *r.f_beta_max;
    return j;
}

int cmd_eval(const EvalArgs& a) {
    const sf::fs::path gt_root = a.gt, pred_root = a.pred;
    for (const auto& d : {gt_root, pred_root}) {
        if (!sf::fs::is_directory(d)) throw sf::FormatError(sf::FormatError::Kind::io, "not a directory: " + d.string());
    }
    if (!a.prob.empty() && !sf::fs::is_directory(a.prob)) {
        throw sf::FormatError(sf::FormatError::Kind::io, "not a directory: " + a.prob);
    }
    // sequence (relative directory) -> sorted frame paths relative to gt_root
    std::map<std::string, std::vector<sf::fs::path>> sequences;
    for (const auto& e : sf::fs::recursive_directory_iterator(gt_root)) {
        if (!e.is_regular_file() || e.path().extension() != ".pgm") continue;
        const auto rel = sf::fs::relative(e.path(), gt_root);
        const std::string seq = rel.has_parent_path() ? rel.parent_path().generic_string() : ".";
        sequences[seq].push_back(rel);
    }
    if (sequences.empty()) throw sf::FormatError(sf::FormatError::Kind::io, "no .pgm masks under " + a.gt);
    std::vector<std::string> missing;
    for (auto& [seq, frames] : sequences) {
        std::sort(frames.begin(), frames.end());
        for (const auto& rel : frames) {
            if (!sf::fs::exists(pred_root / rel)) missing.push_back((pred_root / rel).string());
            if (!a.prob.empty() && !sf::fs::exists(sf::fs::path(a.prob) / rel)) {
                missing.push_back((sf::fs::path(a.prob) / rel).string());
            }
        }
    }
    if (!missing.empty()) {
        std::string msg = "missing counterpart frames:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw Failure(msg);
    }

    json out = {{"sequences", json::array()}};
    std::vector<sf::SequenceReport> reports;
    std::string csv = a.prob.empty() ? "sequence,frames,J,F,G\n" : "sequence,frames,J,F,G,MAE,F_beta_max\n";
    auto csv_row = [&](const sf::SequenceReport& r, std::size_t frames) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%zu,%.6f,%.6f,%.6f", r.name.c_str(), frames, r.j, r.f, r.g);
        csv += buf;
        if (r.mae) {
            std::snprintf(buf, sizeof(buf), ",%.6f,%.6f", *r.mae, *r.f_beta_max);
            csv += buf;
        }
        csv += "\n";
    };
    sf::SequenceReport global;
    global.name = "global";
    std::size_t total_frames = 0;
    double mae_sum = 0, fb_sum = 0;
    for (const auto& [seq, frames] : sequences) {
        sf::SequenceEvaluator ev(seq, a.tol);
        for (const auto& rel : frames) {
            const sf::BinaryMask gt = sf::read_pgm_mask(gt_root / rel);
            const sf::BinaryMask pred = sf::read_pgm_mask(pred_root / rel);
            sf::require_same_extent(pred, gt, rel.string().c_str());
            ev.add(pred, gt);
            if (!a.prob.empty()) {
                const sf::Tensor p = sf::read_pgm_gray(sf::fs::path(a.prob) / rel);
                ev.add_probability(p.data(), gt);
            }
        }
        const auto r = ev.report();
        out["sequences"].push_back(report_json(r, frames.size()));
        csv_row(r, frames.size());
        global.j += r.j;
        global.f += r.f;
        if (r.mae) {
            mae_sum += *r.mae;
            fb_sum += *r.f_beta_max;
        }
        total_frames += frames.size();
    }
    const double n = static_cast<double>(sequences.size());
    global.j /= n;
    global.f /= n;
    global.g = (global.j + global.f) / 2;
    if (!a.prob.empty()) {
        global.mae = mae_sum / n;
        global.f_beta_max = fb_sum / n;
    }
    out["global"] = report_json(global, total_frames);
    csv_row(global, total_frames);
    const sf::fs::path csv_path = a.csv.empty() ? pred_root / "eval.csv" : sf::fs::path(a.csv);
    write_text(csv_path, csv);
    std::cout << out.dump(2) << std::endl;
    return exit_ok;
}

// ---------------------------------------------------------------------------
// check

struct CheckArgs {
    std::string suite = "all";
    std::uint64_t seed = 0;
    std::string inject;
};

int cmd_check(const CheckArgs& a) {
    sf::CheckOptions opt;
    opt.seed = a.seed;
    if (a.inject == "binarize.tie") {
        opt.tie = sf::TieBreak::foreground;
    } else if (!a.inject.empty()) {
        throw sf::ConfigError("unknown fault: " + a.inject);
    }
    std::size_t failed = 0;
    for (const auto& r : sf::run_checks(a.suite, opt)) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
        failed += !r.passed;
    }
    std::cout << (failed ? "FAILED " + std::to_string(failed) + " check(s)" : std::string("all checks passed"))
              << std::endl;
    return failed ? exit_failure : exit_ok;
}

int cmd_params(const std::string& name) {
    const sf::Model model(sf::model_preset(name), 0);
    std::cout << name << " " << sf::count_params(model.params()) << "\n";
    return exit_ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SimulFlow video object segmentation: synthesis, training, inference, evaluation"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic dataset tree");
    s->add_option("--out", synth.out, "output directory")->required();
    s->add_option("--train", synth.n_train, "training sequences")->capture_default_str();
    s->add_option("--val", synth.n_val, "validation sequences")->capture_default_str();
    s->add_option("--size", synth.size, "frame size in pixels")->capture_default_str();
    s->add_option("--distractors", synth.distractors, "distractors per sequence")->capture_default_str();
    s->add_option("--noise", synth.noise, "flow noise std in px")->capture_default_str();
    s->add_option("--length", synth.length, "frames per sequence")->capture_default_str();
    s->add_option("--seed", synth.seed, "base seed")->capture_default_str();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a model");
    t->add_option("--config", train.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    t->add_option("--data", train.data, "dataset root with train/ and val/");
    t->add_option("--out", train.out, "best-J checkpoint path")->required();
    t->add_option("--resume", train.resume, "resume from a <out>.last state")->check(CLI::ExistingFile);
    t->add_option("--steps", train.steps, "override the configured step count");
    t->add_option("--seed", train.seed, "override the configured seed");
    t->add_option("--log-every", train.log_every, "log interval in steps")->capture_default_str();

    InferArgs infer;
    auto* i = app.add_subcommand("infer", "segment one frame");
    i->add_option("--ckpt", infer.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    i->add_option("--image", infer.image, "RGB frame (P6)")->required()->check(CLI::ExistingFile);
    i->add_option("--flow", infer.flow, "flow field (TSR, 2xHxW)")->required()->check(CLI::ExistingFile);
    i->add_option("--out", infer.out, "output mask (P5)")->required();
    i->add_option("--prob", infer.prob, "optional foreground probability map (P5)");
    i->add_option("--size", infer.size, "network input size")->capture_default_str();
    i->add_option("--dump-coarse", infer.dump_coarse, "directory for per-stage coarse masks");
    i->add_option("--dump-attn", infer.dump_attn, "directory for per-stage mean attention maps");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "score predicted masks against ground truth");
    e->add_option("--pred", eval.pred, "predicted mask tree")->required();
    e->add_option("--gt", eval.gt, "ground-truth mask tree")->required();
    e->add_option("--prob", eval.prob, "probability map tree (enables MAE and max F-beta)");
    e->add_option("--csv", eval.csv, "CSV report path (default <pred>/eval.csv)");
    e->add_option("--tol", eval.tol, "boundary tolerance in px (default ceil(0.008 * diagonal))");

    CheckArgs check;
    auto* c = app.add_subcommand("check", "run built-in self-checks");
    c->add_option("--suite", check.suite, "grad | invariants | formats | all")
        ->capture_default_str()
        ->check(CLI::IsMember(sf::check_suites()));
    c->add_option("--seed", check.seed, "seed")->capture_default_str();
    c->add_option("--inject-fault", check.inject, "deliberately break a component (binarize.tie)");

    std::string preset = "small";
    auto* p = app.add_subcommand("params", "print the parameter count of a preset");
    p->add_option("--model", preset, "tiny | small | medium | large")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? exit_ok : exit_usage;
    }

    try {
        if (*s) return cmd_synth(synth);
        if (*t) return cmd_train(train);
        if (*i) return cmd_infer(infer);
        if (*e) return cmd_eval(eval);
        if (*c) return cmd_check(check);
        if (*p) return cmd_params(preset);
    } catch (const Failure& err) {
        std::cerr << "error: " << err.what() << "\n";
        return exit_failure;
    } catch (const sf::NumericError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return exit_failure;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return exit_usage;
    }
    return exit_usage;
}
