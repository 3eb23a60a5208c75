#pragma once

// Built-in self-check suites: grad, invariants, formats.

#include "train.hpp"

#include <chrono>

namespace simulflow {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct CheckOptions {
    std::uint64_t seed = 0;
    TieBreak tie = TieBreak::background;  // fault injection hook for binarize.tie
    fs::path scratch;                     // defaults to a fresh temp directory
};

inline const std::vector<std::string>& check_suites() {
    static const std::vector<std::string> names = {"grad", "invariants", "formats", "all"};
    return names;
}

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <typename T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline CheckResult verdict(std::string name, bool ok, std::string detail) {
    return {std::move(name), ok, std::move(detail)};
}

template <typename F>
CheckResult guarded(const std::string& name, F&& f) {
    try {
        return f();
    } catch (const std::exception& e) {
        return {name, false, std::string("exception: ") + e.what()};
    }
}

/// Relative error with an absolute floor: |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradProbe {
    BasicTensor<double> param;
    std::size_t index;
};

/// Worst relative error between tape gradients and central differences.
inline double probe_gradients(const std::function<BasicTensor<double>()>& loss_fn, std::vector<GradProbe> probes,
                              double h, double floor) {
    for (auto& p : probes) p.param.zero_grad();
    Tape tape;
    {
        Tape::Scope scope(tape);
        const auto loss = loss_fn();
        tape.backward(loss);
    }
    double worst = 0;
    for (auto& p : probes) {
        const double analytic = p.param.has_grad() ? p.param.grad()[p.index] : 0.0;
        auto values = p.param.mutable_data();
        const double x0 = values[p.index];
        values[p.index] = x0 + h;
        const double up = loss_fn().item();
        values[p.index] = x0 - h;
        const double down = loss_fn().item();
        values[p.index] = x0;
        worst = std::max(worst, rel_err(analytic, (up - down) / (2 * h), floor));
    }
    return worst;
}

} // namespace detail

// ---------------------------------------------------------------------------
// invariants

inline CheckResult check_decomposition(std::uint64_t seed) {
    return detail::guarded("attention.decomposition", [&] {
        const ModelConfig cfg = model_preset("tiny");
        double worst = 0;
        for (std::uint64_t trial = 0; trial < 20; ++trial) {
            Rng rng(seed * 1000 + trial);
            const std::size_t stage = trial % num_stages;
            ParamRegistry reg;
            SimulFlowAttention<float> attn(reg, "a", cfg.attention(stage), rng);
            const std::size_t h = ModelConfig::grid(cfg.height, stage), w = ModelConfig::grid(cfg.width, stage);
            const Tensor it = Tensor::randn({h * w, cfg.channels[stage]}, rng);
            const Tensor ot = Tensor::randn({h * w, cfg.channels[stage]}, rng);
            const Tensor coarse = Tensor::randn({h, w}, rng);
            const auto img = attn.project_qkv(it, h, w);
            const auto mot = attn.project_qkv(ot, h, w);
            const Tensor a = softmax(attn.image_logits(img, mot, coarse), 2);
            const Tensor joint = matmul(a, concat(std::vector{img.v, mot.v}, 1));
            const std::size_t m = img.k.dim(1);
            const Tensor split_sum =
                add(matmul(slice(a, 2, 0, m), img.v), matmul(slice(a, 2, m, m), mot.v));
            worst = std::max(worst, detail::max_abs_diff(joint.data(), split_sum.data()));
        }
        return detail::verdict("attention.decomposition", worst <= 1e-5, "max abs diff " + detail::fmt(worst));
    });
}

inline CheckResult check_motion_isolation(std::uint64_t seed) {
    return detail::guarded("encoder.motion_isolation", [&] {
        const Model model(model_preset("tiny"), seed);
        Rng rng(seed + 1);
        const Tensor a = Tensor::uniform({3, 64, 64}, rng, 0.0f, 1.0f);
        const Tensor b = Tensor::uniform({3, 64, 64}, rng, 0.0f, 1.0f);
        const Tensor flow = Tensor::uniform({3, 64, 64}, rng, 0.0f, 1.0f);
        const auto pa = model.encoder()(a, flow);
        const auto pb = model.encoder()(b, flow);
        bool same = true, image_differs = false;
        for (std::size_t i = 0; i < num_stages; ++i) {
            same = same && detail::bitwise_equal(pa.stages[i].motion, pb.stages[i].motion);
            image_differs = image_differs || !detail::bitwise_equal(pa.stages[i].image, pb.stages[i].image);
        }
        return detail::verdict("encoder.motion_isolation", same && image_differs,
                               same ? "motion tokens bitwise identical" : "motion tokens depend on the image");
    });
}

inline CheckResult check_mask_saturation(std::uint64_t seed) {
    return detail::guarded("attention.mask_saturation", [&] {
        const ModelConfig cfg = model_preset("tiny");
        Rng rng(seed + 7);
        ParamRegistry reg;
        SimulFlowAttention<float> attn(reg, "a", cfg.attention(0), rng);
        const std::size_t h = 16, w = 16;
        const auto img = attn.project_qkv(Tensor::randn({h * w, cfg.channels[0]}, rng), h, w);
        const auto mot = attn.project_qkv(Tensor::randn({h * w, cfg.channels[0]}, rng), h, w);
        const Tensor raw = correlation_map(img.q, concat(std::vector{img.k, mot.k}, 1));
        const Tensor sat = attn.image_logits(img, mot, Tensor::full({h, w}, 100.0f));
        const Tensor half = attn.image_logits(img, mot, Tensor::zeros({h, w}));
        const double d_sat = detail::max_abs_diff(softmax(sat, 2).data(), softmax(raw, 2).data());
        const double d_half = detail::max_abs_diff(half.data(), scale(raw, 0.5f).data());
        return detail::verdict("attention.mask_saturation", d_sat <= 1e-5 && d_half <= 1e-6,
                               "S=+100: " + detail::fmt(d_sat) + ", S=0: " + detail::fmt(d_half));
    });
}

inline CheckResult check_binarize_tie(TieBreak tie) {
    return detail::guarded("binarize.tie", [&] {
        const Tensor ties = Tensor::full({2, 4, 4}, 0.25f);
        const bool tie_ok = binarize(ties, tie).count() == 0;
        std::vector<float> v(32, 0.0f);
        std::fill(v.begin() + 16, v.end(), 1.0f);
        const bool fg_ok = binarize(Tensor({2, 4, 4}, v), tie).count() == 16;
        return detail::verdict("binarize.tie", tie_ok && fg_ok,
                               tie_ok ? "ties resolve to background" : "ties resolved to foreground");
    });
}

inline CheckResult check_loss_reassembly(std::uint64_t seed) {
    return detail::guarded("loss.reassembly", [&] {
        const Model model(model_preset("tiny"), seed);
        const auto seq = generate_sequence(random_scene(seed + 3, SceneOptions{}));
        const auto out = model(seq[0].image, seq[0].flow_rgb);
        const auto loss = segmentation_loss(out.logits, out.pyramid.coarse_masks, seq[0].gt, 0.1);
        double parts = loss.main;
        for (double a : loss.aux) parts += 0.1 * a;
        const double diff = std::abs(parts - loss.total_value());
        return detail::verdict("loss.reassembly", diff <= 1e-6 * std::max(1.0, parts) && loss.total_value() >= 0,
                               "|total - parts| = " + detail::fmt(diff));
    });
}

inline CheckResult check_shape_schedule(std::uint64_t seed) {
    return detail::guarded("shape.schedule", [&] {
        for (std::size_t size : {64u, 128u}) {
            ModelConfig cfg = model_preset("tiny");
            cfg.height = cfg.width = size;
            const Model model(cfg, seed);
            Rng rng(seed);
            const Tensor x = Tensor::uniform({3, size, size}, rng, 0.0f, 1.0f);
            const auto out = model(x, x);
            for (std::size_t i = 0; i < num_stages; ++i) {
                const std::size_t g = size >> (i + 2);
                const auto& st = out.pyramid.stages[i];
                if (st.height != g || st.width != g || st.image.shape() != Shape{g * g, cfg.channels[i]} ||
                    out.pyramid.coarse_masks[i].shape() != Shape{g, g}) {
                    return detail::verdict("shape.schedule", false,
                                           "stage " + std::to_string(i + 1) + " grid wrong at " + std::to_string(size));
                }
            }
            if (out.logits.shape() != Shape{2, size, size}) {
                return detail::verdict("shape.schedule", false, "logits " + shape_str(out.logits.shape()));
            }
        }
        return detail::verdict("shape.schedule", true, "grids H/4..H/32, logits 2xHxW");
    });
}

// ---------------------------------------------------------------------------
// grad

inline CheckResult check_grad_ops(std::uint64_t seed) {
    return detail::guarded("grad.ops", [&] {
        using D = BasicTensor<double>;
        Rng rng(seed + 11);
        D x = D::randn({2, 4, 4}, rng).set_requires_grad();
        D w = D::randn({3, 2, 3, 3}, rng, 0.5).set_requires_grad();
        D b = D::randn({3}, rng).set_requires_grad();
        D gamma = D::randn({3}, rng).set_requires_grad();
        D beta = D::randn({3}, rng).set_requires_grad();
        D proj = D::randn({5, 3}, rng, 0.5).set_requires_grad();
        const std::vector<std::uint8_t> labels = {0, 1, 1, 0, 1, 0, 0, 1, 1};
        auto loss_fn = [&] {
            D y = conv2d(x, w, b, 1, 1);                         // [3 x 4 x 4]
            y = bilinear_resize(gelu(y), 3, 3);                  // [3 x 3 x 3]
            D tokens = layer_norm(map_to_tokens(y), gamma, beta, 1e-6);  // [9 x 3]
            D logits = softmax(linear(tokens, proj, D()), 1);    // [9 x 5]
            D pair = tokens_to_map(slice(logits, 1, 0, 2), 3, 3);
            return add(cross_entropy(scale(pair, 4.0), labels), mean(sigmoid(y)));
        };
        std::vector<detail::GradProbe> probes;
        for (const D* t : {&x, &w, &b, &gamma, &beta, &proj}) {
            for (std::size_t k = 0; k < 3; ++k) probes.push_back({*t, (k * 7) % t->numel()});
        }
        const double worst = detail::probe_gradients(loss_fn, probes, 1e-5, 1e-8);
        return detail::verdict("grad.ops", worst <= 1e-5, "worst relative error " + detail::fmt(worst));
    });
}

/// Gradient of the full loss (tiny config at 32x32, f64) against central differences.
inline CheckResult check_grad_model(std::uint64_t seed, std::size_t n_params = 16) {
    return detail::guarded("grad.model", [&] {
        ModelConfig cfg = model_preset("tiny");
        cfg.height = cfg.width = 32;
        const BasicModel<double> model(cfg, seed);
        SceneOptions so;
        so.size = 32;
        so.length = 1;
        const auto seq = generate_sequence(random_scene(seed + 5, so));
        const auto image = tensor_cast<double>(seq[0].image);
        const auto flow = tensor_cast<double>(seq[0].flow_rgb);
        auto loss_fn = [&] {
            const auto out = model(image, flow);
            return segmentation_loss(out.logits, out.pyramid.coarse_masks, seq[0].gt, cfg.lambda).total;
        };
        std::vector<BasicTensor<double>> params;
        for (const auto& [name, p] : model.params()) params.push_back(p);
        Rng rng(seed + 9);
        std::vector<detail::GradProbe> probes;
        for (std::size_t k = 0; k < n_params; ++k) {
            const auto& p = params[std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng)];
            probes.push_back({p, std::uniform_int_distribution<std::size_t>(0, p.numel() - 1)(rng)});
        }
        const double worst = detail::probe_gradients(loss_fn, probes, 1e-6, 1e-5);
        return detail::verdict("grad.model", worst <= 1e-3, "worst relative error " + detail::fmt(worst));
    });
}

// ---------------------------------------------------------------------------
// formats

template <typename F>
bool throws_kind(FormatError::Kind kind, F&& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.kind() == kind;
    } catch (...) {
        return false;
    }
    return false;
}

inline CheckResult check_tsr(const fs::path& dir, std::uint64_t seed) {
    return detail::guarded("io.tsr", [&] {
        Rng rng(seed);
        const Tensor t = Tensor::randn({3, 4, 5}, rng);
        write_tsr(dir / "t.tsr", t);
        const bool round = detail::bitwise_equal(read_tsr(dir / "t.tsr"), t);
        Bytes header;
        encode_tsr(header, Tensor::zeros({2, 3}));
        const bool size_ok = header.size() == 14 + 24;
        Bytes bad = read_file(dir / "t.tsr");
        bad[0] = 'X';
        const bool magic = throws_kind(FormatError::Kind::bad_magic, [&] {
            std::size_t off = 0;
            decode_tsr(bad, off);
        });
        Bytes shortened = read_file(dir / "t.tsr");
        shortened.resize(shortened.size() - 3);
        const bool trunc = throws_kind(FormatError::Kind::truncated, [&] {
            std::size_t off = 0;
            decode_tsr(shortened, off);
        });
        Bytes dtype = read_file(dir / "t.tsr");
        dtype[4] = 7;
        const bool unknown = throws_kind(FormatError::Kind::unknown_dtype, [&] {
            std::size_t off = 0;
            decode_tsr(dtype, off);
        });
        const bool ok = round && size_ok && magic && trunc && unknown;
        return detail::verdict("io.tsr", ok, ok ? "round-trip and corruption handling" : "tsr format violation");
    });
}

inline CheckResult check_checkpoint(const fs::path& dir, std::uint64_t seed) {
    return detail::guarded("io.checkpoint", [&] {
        const Model a(model_preset("tiny"), seed);
        const Model b(model_preset("tiny"), seed + 1);
        save_checkpoint(dir / "m.sfck", a.params(), {{config_entry_name, encode_model_config(a.config())}});
        load_checkpoint(dir / "m.sfck", b.params());
        Rng rng(seed);
        const Tensor x = Tensor::uniform({3, 64, 64}, rng, 0.0f, 1.0f);
        const bool same = detail::bitwise_equal(a(x, x).logits, b(x, x).logits);
        Bytes bytes = read_file(dir / "m.sfck");
        bytes[bytes.size() / 2] ^= 0x01;
        const bool crc = throws_kind(FormatError::Kind::crc_mismatch, [&] { decode_checkpoint(bytes); });
        ModelConfig other = model_preset("tiny");
        other.depths = {1, 1, 2, 1};
        const Model c(other, seed);
        const bool names = throws_kind(FormatError::Kind::name_mismatch, [&] { load_checkpoint(dir / "m.sfck", c.params()); });
        const bool ok = same && crc && names;
        return detail::verdict("io.checkpoint", ok,
                               std::string("forward ") + (same ? "identical" : "differs") + ", crc " +
                                   (crc ? "detected" : "missed") + ", name diff " + (names ? "reported" : "missed"));
    });
}

inline CheckResult check_pnm(const fs::path& dir, std::uint64_t seed) {
    return detail::guarded("io.pnm", [&] {
        Rng rng(seed);
        std::vector<std::uint8_t> bits(5 * 7);
        for (auto& v : bits) v = static_cast<std::uint8_t>(rng() & 1);
        const BinaryMask m(5, 7, bits);
        write_pgm_mask(dir / "m.pgm", m);
        const bool mask_ok = read_pgm_mask(dir / "m.pgm") == m;
        std::vector<float> px(3 * 4 * 6);
        for (auto& v : px) v = static_cast<float>((rng() % 256) / 255.0);
        const Tensor img({3, 4, 6}, px);
        write_ppm(dir / "i.ppm", img);
        const bool rgb_ok = detail::bitwise_equal(read_ppm(dir / "i.ppm"), img);
        const std::string p2 = "P2\n1 1\n255\n0\n";
        const bool magic = throws_kind(FormatError::Kind::bad_magic, [&] {
            decode_pgm_mask(Bytes(p2.begin(), p2.end()));
        });
        const std::string mx = "P5\n1 1\n15\n";
        Bytes maxval(mx.begin(), mx.end());
        maxval.push_back(0);
        const bool max_ok = throws_kind(FormatError::Kind::bad_maxval, [&] { decode_pgm_mask(maxval); });
        const std::string gv = "P5\n1 1\n255\n";
        Bytes grey(gv.begin(), gv.end());
        grey.push_back(128);
        const bool value = throws_kind(FormatError::Kind::bad_mask_value, [&] { decode_pgm_mask(grey); });
        const bool ok = mask_ok && rgb_ok && magic && max_ok && value;
        return detail::verdict("io.pnm", ok, ok ? "round-trip and corruption handling" : "pgm/ppm format violation");
    });
}

// ---------------------------------------------------------------------------

inline std::vector<CheckResult> run_checks(const std::string& suite, const CheckOptions& opt = {}) {
    const auto& names = check_suites();
    if (std::find(names.begin(), names.end(), suite) == names.end()) {
        throw ConfigError("unknown check suite: " + suite);
    }
    const bool all = suite == "all";
    std::vector<CheckResult> out;
    if (all || suite == "invariants") {
        out.push_back(check_decomposition(opt.seed));
        out.push_back(check_motion_isolation(opt.seed));
        out.push_back(check_mask_saturation(opt.seed));
        out.push_back(check_binarize_tie(opt.tie));
        out.push_back(check_loss_reassembly(opt.seed));
        out.push_back(check_shape_schedule(opt.seed));
    }
    if (all || suite == "grad") {
        out.push_back(check_grad_ops(opt.seed));
        out.push_back(check_grad_model(opt.seed));
    }
    if (all || suite == "formats") {
        fs::path dir = opt.scratch;
        if (dir.empty()) {
            dir = fs::temp_directory_path() /
                  ("simulflow-check-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
        }
        fs::create_directories(dir);
        out.push_back(check_tsr(dir, opt.seed));
        out.push_back(check_checkpoint(dir, opt.seed));
        out.push_back(check_pnm(dir, opt.seed));
        if (opt.scratch.empty()) fs::remove_all(dir);
    }
    return out;
}

} // namespace simulflow
