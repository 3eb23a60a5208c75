#pragma once

// Region similarity J, boundary accuracy F, their mean G, MAE and max F-beta.

#include "mask.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>

namespace simulflow {

/// |pred & gt| / |pred | gt|; 1 when both masks are empty.
inline double region_similarity(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_extent(pred, gt, "region_similarity");
    std::size_t inter = 0, uni = 0;
    const auto& a = pred.values();
    const auto& b = gt.values();
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] & b[i];
        uni += a[i] | b[i];
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Foreground pixels with a 4-neighbour outside the mask (off-image counts as outside).
inline BinaryMask boundary_map(const BinaryMask& m) {
    const std::size_t h = m.height(), w = m.width();
    BinaryMask b(h, w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (!m(y, x)) continue;
            const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || !m(y - 1, x) || !m(y + 1, x) ||
                              !m(y, x - 1) || !m(y, x + 1);
            b.set(y, x, edge);
        }
    }
    return b;
}

/// Square (Chebyshev) dilation by `radius` pixels.
inline BinaryMask dilate(const BinaryMask& m, std::size_t radius) {
    const std::size_t h = m.height(), w = m.width();
    // separable: rows then columns
    BinaryMask rows(h, w), out(h, w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t x0 = x >= radius ? x - radius : 0, x1 = std::min(w - 1, x + radius);
            bool on = false;
            for (std::size_t xx = x0; xx <= x1 && !on; ++xx) on = m(y, xx) != 0;
            rows.set(y, x, on);
        }
    }
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t y0 = y >= radius ? y - radius : 0, y1 = std::min(h - 1, y + radius);
        for (std::size_t x = 0; x < w; ++x) {
            bool on = false;
            for (std::size_t yy = y0; yy <= y1 && !on; ++yy) on = rows(yy, x) != 0;
            out.set(y, x, on);
        }
    }
    return out;
}

/// Boundary tolerance used by the DAVIS benchmark: ceil(0.008 * diagonal).
inline std::size_t default_boundary_tolerance(std::size_t height, std::size_t width) {
    const double diag = std::sqrt(static_cast<double>(height * height + width * width));
    return static_cast<std::size_t>(std::ceil(0.008 * diag));
}

/// Boundary F-measure; boundary pixels match within Chebyshev distance tol_px.
inline double boundary_f(const BinaryMask& pred, const BinaryMask& gt, std::size_t tol_px) {
    require_same_extent(pred, gt, "boundary_f");
    const BinaryMask pb = boundary_map(pred);
    const BinaryMask gb = boundary_map(gt);
    const std::size_t np = pb.count(), ng = gb.count();
    if (np == 0 && ng == 0) return 1.0;
    const BinaryMask gd = dilate(gb, tol_px);
    const BinaryMask pd = dilate(pb, tol_px);
    std::size_t pred_hit = 0, gt_hit = 0;
    for (std::size_t i = 0; i < pb.size(); ++i) {
        pred_hit += pb.values()[i] & gd.values()[i];
        gt_hit += gb.values()[i] & pd.values()[i];
    }
    const double precision = np ? static_cast<double>(pred_hit) / static_cast<double>(np) : 0.0;
    const double recall = ng ? static_cast<double>(gt_hit) / static_cast<double>(ng) : 0.0;
    if (precision + recall == 0) return 0.0;
    return 2 * precision * recall / (precision + recall);
}

inline double boundary_f(const BinaryMask& pred, const BinaryMask& gt) {
    return boundary_f(pred, gt, default_boundary_tolerance(gt.height(), gt.width()));
}

inline void require_prob_extent(std::span<const float> prob, const BinaryMask& gt, const char* what) {
    if (prob.size() != gt.size()) {
        throw ShapeError(std::string(what) + ": probability map has " + std::to_string(prob.size()) +
                         " values, mask has " + std::to_string(gt.size()));
    }
}

inline double mae(std::span<const float> prob, const BinaryMask& gt) {
    require_prob_extent(prob, gt, "mae");
    double total = 0;
    for (std::size_t i = 0; i < prob.size(); ++i) total += std::abs(double(prob[i]) - gt.values()[i]);
    return total / static_cast<double>(prob.size());
}

inline constexpr std::size_t num_fbeta_thresholds = 255;

/// Threshold k of the sweep: k / 254, k = 0 .. 254. Pixels >= threshold are foreground.
inline double fbeta_threshold(std::size_t k) { return static_cast<double>(k) / (num_fbeta_thresholds - 1); }

using FBetaCurve = std::array<double, num_fbeta_thresholds>;

inline FBetaCurve f_beta_curve(std::span<const float> prob, const BinaryMask& gt, double beta2 = 0.3) {
    require_prob_extent(prob, gt, "f_beta");
    FBetaCurve curve{};
    const std::size_t positives = gt.count();
    for (std::size_t k = 0; k < num_fbeta_thresholds; ++k) {
        const double t = fbeta_threshold(k);
        std::size_t tp = 0, predicted = 0;
        for (std::size_t i = 0; i < prob.size(); ++i) {
            if (prob[i] >= t) {
                ++predicted;
                tp += gt.values()[i];
            }
        }
        const double p = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        const double r = positives ? static_cast<double>(tp) / static_cast<double>(positives) : 0.0;
        const double denom = beta2 * p + r;
        curve[k] = denom > 0 ? (1 + beta2) * p * r / denom : 0.0;
    }
    return curve;
}

inline double f_beta_max(std::span<const float> prob, const BinaryMask& gt, double beta2 = 0.3) {
    const auto curve = f_beta_curve(prob, gt, beta2);
    return *std::max_element(curve.begin(), curve.end());
}

struct FrameScore {
    double j = 0;
    double f = 0;
};

struct SequenceReport {
    std::string name;
    std::vector<FrameScore> frames;
    double j = 0;
    double f = 0;
    double g = 0;
    std::optional<double> mae;
    std::optional<double> f_beta_max;
};

/// Accumulates per-frame scores for one sequence (or a whole split).
class SequenceEvaluator {
public:
    explicit SequenceEvaluator(std::string name, std::optional<std::size_t> tol_px = std::nullopt)
        : name_(std::move(name)), tol_px_(tol_px) {}

    void add(const BinaryMask& pred, const BinaryMask& gt) {
        const std::size_t tol = tol_px_ ? *tol_px_ : default_boundary_tolerance(gt.height(), gt.width());
        frames_.push_back({region_similarity(pred, gt), boundary_f(pred, gt, tol)});
    }

    void add_probability(std::span<const float> prob, const BinaryMask& gt) {
        mae_total_ += mae(prob, gt);
        const auto curve = f_beta_curve(prob, gt);
        for (std::size_t k = 0; k < curve.size(); ++k) curve_total_[k] += curve[k];
        ++prob_frames_;
    }

    std::size_t size() const { return frames_.size(); }

    SequenceReport report() const {
        SequenceReport r;
        r.name = name_;
        r.frames = frames_;
        if (!frames_.empty()) {
            for (const auto& s : frames_) {
                r.j += s.j;
                r.f += s.f;
            }
            r.j /= static_cast<double>(frames_.size());
            r.f /= static_cast<double>(frames_.size());
        }
        r.g = (r.j + r.f) / 2;
        if (prob_frames_ > 0) {
            r.mae = mae_total_ / static_cast<double>(prob_frames_);
            double best = 0;
            for (const double v : curve_total_) best = std::max(best, v / static_cast<double>(prob_frames_));
            r.f_beta_max = best;
        }
        return r;
    }

private:
    std::string name_;
    std::optional<std::size_t> tol_px_;
    std::vector<FrameScore> frames_;
    double mae_total_ = 0;
    FBetaCurve curve_total_{};
    std::size_t prob_frames_ = 0;
};

} // namespace simulflow
