#pragma once

// Synthetic moving-shape sequences with exact optical flow.
//
// Each scene has one primary object (the segmentation target) and a set of
// distractors over a drifting textured background. Even-indexed
// distractors are camouflaged (background-like texture) but move on their
// own; odd-indexed distractors look like the primary object but move with
// the background. Only the conjunction of appearance and motion identifies
// the target.

#include "mask.hpp"
#include "tensor.hpp"

#include <array>
#include <set>

namespace simulflow {

enum class ShapeKind { rect, disc };
enum class TextureStyle { object, camouflage };

struct ObjectSpec {
    ShapeKind shape = ShapeKind::rect;
    int width = 16;   // bounding box; discs use min(width, height) as diameter
    int height = 16;
    int x0 = 0;       // bounding-box origin at frame 0
    int y0 = 0;
    int vx = 0;       // integer px / frame
    int vy = 0;
    std::uint64_t texture_seed = 0;
    TextureStyle style = TextureStyle::object;

    int x_at(std::size_t t) const { return x0 + static_cast<int>(t) * vx; }
    int y_at(std::size_t t) const { return y0 + static_cast<int>(t) * vy; }

    /// Footprint test in object-local coordinates.
    bool covers(int lx, int ly) const {
        if (lx < 0 || ly < 0 || lx >= width || ly >= height) return false;
        if (shape == ShapeKind::rect) return true;
        const double d = std::min(width, height);
        const double r = d / 2.0;
        const double dx = lx + 0.5 - r, dy = ly + 0.5 - r;
        return dx * dx + dy * dy <= r * r;
    }
};

struct SceneSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    ObjectSpec primary;
    std::vector<ObjectSpec> distractors;
    int drift_x = 0;
    int drift_y = 0;
    double flow_noise_std = 0.0;
    std::size_t length = 8;
    std::uint64_t seed = 0;
    std::uint64_t background_seed = 0;
    std::string variant = "standard";

    /// Every object must stay at least 1 px inside the canvas on every frame.
    void validate() const {
        if (height < 4 || width < 4 || length == 0) throw ConfigError("scene: canvas and length must be positive");
        if (!(flow_noise_std >= 0)) throw ConfigError("scene: flow noise std must be >= 0");
        auto check = [&](const ObjectSpec& o, const char* what) {
            if (o.width <= 0 || o.height <= 0) throw ConfigError(std::string("scene: ") + what + " has empty extent");
            for (std::size_t t = 0; t < length; ++t) {
                const int x = o.x_at(t), y = o.y_at(t);
                if (x < 1 || y < 1 || x + o.width > static_cast<int>(width) - 1 ||
                    y + o.height > static_cast<int>(height) - 1) {
                    throw ConfigError(std::string("scene: ") + what + " leaves the canvas at frame " +
                                      std::to_string(t));
                }
            }
        };
        check(primary, "primary object");
        for (const auto& d : distractors) check(d, "distractor");
    }
};

struct Sample {
    Tensor image;     // [3 x H x W] in [0, 1]
    Tensor flow;      // [2 x H x W], (u, v) in px / frame
    Tensor flow_rgb;  // [3 x H x W] in [0, 1]
    BinaryMask gt;    // primary object only
};

namespace detail {

// Procedural texture: a few seeded sinusoids per channel around a base colour.
class Texture {
public:
    Texture(std::uint64_t seed, TextureStyle style) {
        Rng rng(seed);
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        if (style == TextureStyle::object) {
            // saturated hue with stripe detail
            const double hue = u01(rng) * 6.0;
            for (int c = 0; c < 3; ++c) {
                const double phase = std::fmod(hue + 2.0 * c, 6.0);
                const double v = std::clamp(std::abs(phase - 3.0) - 1.0, 0.0, 1.0);
                base_[c] = 0.15 + 0.7 * v;
            }
            amplitude_ = 0.12;
            freq_lo_ = 0.5;
            freq_hi_ = 1.2;
        } else {
            const double grey = 0.35 + 0.3 * u01(rng);
            for (int c = 0; c < 3; ++c) base_[c] = grey + 0.06 * (u01(rng) - 0.5);
            amplitude_ = 0.09;
            freq_lo_ = 0.1;
            freq_hi_ = 0.6;
        }
        for (auto& wave : waves_) {
            const double angle = u01(rng) * 2.0 * 3.14159265358979323846;
            const double f = freq_lo_ + (freq_hi_ - freq_lo_) * u01(rng);
            wave = {f * std::cos(angle), f * std::sin(angle), u01(rng) * 6.283185307179586, u01(rng)};
        }
        shared_ = style == TextureStyle::camouflage;
    }

    float at(int x, int y, int channel) const {
        double v = base_[channel];
        for (std::size_t k = 0; k < waves_.size(); ++k) {
            const auto& w = waves_[k];
            // camouflage shares the pattern across channels (low saturation)
            const double phase = shared_ ? w.phase : w.phase + 1.7 * channel;
            v += amplitude_ * w.weight * std::sin(w.fx * x + w.fy * y + phase);
        }
        return static_cast<float>(std::clamp(v, 0.0, 1.0));
    }

private:
    struct Wave {
        double fx, fy, phase, weight;
    };
    std::array<double, 3> base_{};
    std::array<Wave, 4> waves_{};
    double amplitude_ = 0, freq_lo_ = 0, freq_hi_ = 0;
    bool shared_ = false;
};

} // namespace detail

/// Encode a flow field [2 x H x W] as a 3-channel image in [0, 1]:
/// (0.5 + u/2m, 0.5 + v/2m, |(u,v)| / (sqrt(2) m)) with m = max(|u|, |v|, eps).
inline Tensor flow_to_rgb(const Tensor& flow) {
    if (flow.rank() != 3 || flow.dim(0) != 2) throw ShapeError("flow_to_rgb: expects [2 x H x W]");
    const std::size_t n = flow.dim(1) * flow.dim(2);
    const auto f = flow.data();
    double m = 1e-6;
    for (const float v : f) m = std::max(m, static_cast<double>(std::abs(v)));
    std::vector<float> out(3 * n);
    for (std::size_t p = 0; p < n; ++p) {
        const double u = f[p], v = f[n + p];
        out[p] = static_cast<float>(std::clamp(0.5 + u / (2 * m), 0.0, 1.0));
        out[n + p] = static_cast<float>(std::clamp(0.5 + v / (2 * m), 0.0, 1.0));
        out[2 * n + p] = static_cast<float>(std::clamp(std::sqrt(u * u + v * v) / (std::sqrt(2.0) * m), 0.0, 1.0));
    }
    return Tensor({3, flow.dim(1), flow.dim(2)}, std::move(out));
}

/// Render every frame of a scene; deterministic for a given spec.
inline std::vector<Sample> generate_sequence(const SceneSpec& spec) {
    spec.validate();
    const std::size_t h = spec.height, w = spec.width, n = h * w;
    const detail::Texture background(spec.background_seed, TextureStyle::camouflage);
    std::vector<detail::Texture> distractor_tex;
    for (const auto& d : spec.distractors) distractor_tex.emplace_back(d.texture_seed, d.style);
    const detail::Texture primary_tex(spec.primary.texture_seed, spec.primary.style);

    Rng noise_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> noise(0.0, 1.0);

    std::vector<Sample> frames;
    frames.reserve(spec.length);
    for (std::size_t t = 0; t < spec.length; ++t) {
        std::vector<float> image(3 * n), flow(2 * n);
        BinaryMask gt(h, w);
        const int bx = static_cast<int>(t) * spec.drift_x, by = static_cast<int>(t) * spec.drift_y;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t p = y * w + x;
                const int xi = static_cast<int>(x), yi = static_cast<int>(y);
                for (int c = 0; c < 3; ++c) image[c * n + p] = background.at(xi - bx, yi - by, c);
                flow[p] = static_cast<float>(spec.drift_x);
                flow[n + p] = static_cast<float>(spec.drift_y);
            }
        }
        auto paint = [&](const ObjectSpec& o, const detail::Texture& tex, bool primary) {
            const int ox = o.x_at(t), oy = o.y_at(t);
            for (int ly = 0; ly < o.height; ++ly) {
                for (int lx = 0; lx < o.width; ++lx) {
                    if (!o.covers(lx, ly)) continue;
                    const std::size_t p = static_cast<std::size_t>(oy + ly) * w + static_cast<std::size_t>(ox + lx);
                    for (int c = 0; c < 3; ++c) image[c * n + p] = tex.at(lx, ly, c);
                    flow[p] = static_cast<float>(o.vx);
                    flow[n + p] = static_cast<float>(o.vy);
                    gt.set(p / w, p % w, primary);
                }
            }
        };
        for (std::size_t k = 0; k < spec.distractors.size(); ++k) paint(spec.distractors[k], distractor_tex[k], false);
        paint(spec.primary, primary_tex, true);
        if (spec.flow_noise_std > 0) {
            for (auto& v : flow) v = static_cast<float>(v + spec.flow_noise_std * noise(noise_rng));
        }
        Sample s;
        s.image = Tensor({3, h, w}, std::move(image));
        s.flow = Tensor({2, h, w}, std::move(flow));
        s.flow_rgb = flow_to_rgb(s.flow);
        s.gt = std::move(gt);
        frames.push_back(std::move(s));
    }
    return frames;
}

/// Knobs for randomly drawn scenes.
struct SceneOptions {
    std::size_t size = 64;
    std::size_t distractors = 2;
    double flow_noise_std = 0.5;
    std::size_t length = 8;
};

namespace detail {

// Pick an origin so the box stays >= 1 px inside [0, extent) for `length`
// frames at velocity v; shrinks |v| until it fits.
inline bool place_axis(Rng& rng, int extent, int box, int& v, std::size_t length, int& origin) {
    for (;;) {
        const int travel = static_cast<int>(length - 1) * v;
        const int lo = 1 - std::min(0, travel);
        const int hi = extent - 1 - box - std::max(0, travel);
        if (lo <= hi) {
            origin = std::uniform_int_distribution<int>(lo, hi)(rng);
            return true;
        }
        if (v == 0) return false;
        v += v > 0 ? -1 : 1;
    }
}

inline ObjectSpec random_object(Rng& rng, const SceneOptions& opt, int min_size, int max_size, int vx, int vy,
                                TextureStyle style) {
    ObjectSpec o;
    std::uniform_int_distribution<int> size(min_size, max_size);
    o.shape = std::uniform_int_distribution<int>(0, 1)(rng) ? ShapeKind::disc : ShapeKind::rect;
    o.width = size(rng);
    o.height = o.shape == ShapeKind::disc ? o.width : size(rng);
    o.vx = vx;
    o.vy = vy;
    const int extent = static_cast<int>(opt.size);
    if (!place_axis(rng, extent, o.width, o.vx, opt.length, o.x0) ||
        !place_axis(rng, extent, o.height, o.vy, opt.length, o.y0)) {
        throw ConfigError("scene: object does not fit the canvas");
    }
    o.texture_seed = rng();
    o.style = style;
    return o;
}

} // namespace detail

/// Draw a random scene from a seed. Variants: "standard", "distractor_heavy"
/// (larger, faster distractors), "noise_heavy" (3x flow noise).
inline SceneSpec random_scene(std::uint64_t seed, const SceneOptions& opt, const std::string& variant = "standard") {
    if (variant != "standard" && variant != "distractor_heavy" && variant != "noise_heavy") {
        throw ConfigError("unknown scene variant: " + variant);
    }
    Rng rng(seed);
    SceneSpec spec;
    spec.height = spec.width = opt.size;
    spec.length = opt.length;
    spec.seed = seed;
    spec.variant = variant;
    spec.background_seed = rng();
    spec.flow_noise_std = variant == "noise_heavy" ? 3.0 * opt.flow_noise_std : opt.flow_noise_std;
    std::uniform_int_distribution<int> drift(-1, 1);
    spec.drift_x = drift(rng);
    spec.drift_y = drift(rng);

    const int s = static_cast<int>(opt.size);
    const int big_lo = std::max(4, s * 7 / 32), big_hi = std::max(5, s * 3 / 8);
    const int small_lo = std::max(3, s / 8), small_hi = std::max(4, s / 4);
    std::uniform_int_distribution<int> vel(-3, 3);

    // the primary object always moves relative to the background
    int vx, vy;
    do {
        vx = vel(rng);
        vy = vel(rng);
    } while (std::abs(vx - spec.drift_x) + std::abs(vy - spec.drift_y) < 2);
    spec.primary = detail::random_object(rng, opt, big_lo, big_hi, vx, vy, TextureStyle::object);

    const bool heavy = variant == "distractor_heavy";
    for (std::size_t k = 0; k < opt.distractors; ++k) {
        const bool camouflaged = k % 2 == 0;
        int dvx = spec.drift_x, dvy = spec.drift_y;
        if (camouflaged) {
            do {
                dvx = vel(rng);
                dvy = vel(rng);
            } while (std::abs(dvx - spec.drift_x) + std::abs(dvy - spec.drift_y) < (heavy ? 3 : 2));
        }
        spec.distractors.push_back(detail::random_object(rng, opt, heavy ? big_lo : small_lo,
                                                         heavy ? big_hi : small_hi, dvx, dvy,
                                                         camouflaged ? TextureStyle::camouflage : TextureStyle::object));
    }
    spec.validate();
    return spec;
}

struct Splits {
    std::vector<SceneSpec> train;
    std::vector<SceneSpec> val;
};

inline const char* val_variant(std::size_t index) {
    static constexpr const char* names[] = {"standard", "distractor_heavy", "noise_heavy"};
    return names[index % 3];
}

/// Deterministic, disjoint train / val scene lists. Validation cycles
/// through the standard, distractor-heavy and noise-heavy variants.
inline Splits make_splits(std::size_t n_train, std::size_t n_val, std::uint64_t base_seed,
                          const SceneOptions& opt = {}) {
    if (n_train == 0 || n_val == 0) throw ConfigError("make_splits: counts must be positive");
    Rng rng(base_seed);
    std::set<std::uint64_t> used;
    auto fresh = [&] {
        std::uint64_t s;
        do {
            s = rng();
        } while (!used.insert(s).second);
        return s;
    };
    Splits out;
    for (std::size_t i = 0; i < n_train; ++i) out.train.push_back(random_scene(fresh(), opt, "standard"));
    for (std::size_t i = 0; i < n_val; ++i) out.val.push_back(random_scene(fresh(), opt, val_variant(i)));
    return out;
}

} // namespace simulflow
