#include "simulflow/metrics.hpp"
#include "simulflow/tensor.hpp"

#include <gtest/gtest.h>

using namespace simulflow;

namespace {

BinaryMask random_blob_mask(std::size_t h, std::size_t w, Rng& rng) {
    BinaryMask m(h, w);
    const std::size_t blobs = 1 + rng() % 3;
    for (std::size_t b = 0; b < blobs; ++b) {
        const std::size_t y0 = rng() % h, x0 = rng() % w, bh = 1 + rng() % (h / 2), bw = 1 + rng() % (w / 2);
        for (std::size_t y = y0; y < std::min(h, y0 + bh); ++y)
            for (std::size_t x = x0; x < std::min(w, x0 + bw); ++x) m.set(y, x, true);
    }
    return m;
}

// Boundary pixel list: foreground with a 4-neighbour that is background or off-image.
std::vector<std::pair<long, long>> boundary_pixels(const BinaryMask& m) {
    std::vector<std::pair<long, long>> out;
    const long h = long(m.height()), w = long(m.width());
    auto fg = [&](long y, long x) { return y >= 0 && x >= 0 && y < h && x < w && m(std::size_t(y), std::size_t(x)); };
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) out.push_back({y, x});
    return out;
}

// Brute-force matcher: a boundary pixel counts if any boundary pixel of the
// other mask lies within Chebyshev distance tol.
double brute_force_f(const BinaryMask& pred, const BinaryMask& gt, long tol) {
    const auto pb = boundary_pixels(pred), gb = boundary_pixels(gt);
    if (pb.empty() && gb.empty()) return 1.0;
    auto matched = [&](const auto& from, const auto& to) {
        std::size_t hit = 0;
        for (const auto& [y, x] : from) {
            for (const auto& [yy, xx] : to) {
                if (std::max(std::abs(y - yy), std::abs(x - xx)) <= tol) {
                    ++hit;
                    break;
                }
            }
        }
        return hit;
    };
    const double p = pb.empty() ? 0.0 : double(matched(pb, gb)) / double(pb.size());
    const double r = gb.empty() ? 0.0 : double(matched(gb, pb)) / double(gb.size());
    return p + r == 0 ? 0.0 : 2 * p * r / (p + r);
}

std::vector<float> as_prob(const BinaryMask& m) { return {m.values().begin(), m.values().end()}; }

} // namespace

TEST(RegionSimilarity, OneThirdOverlap) {
    // pred covers columns 0-3 of row 0, gt covers columns 2-5
    BinaryMask pred(1, 6), gt(1, 6);
    for (std::size_t x = 0; x < 4; ++x) pred.set(0, x, true);
    for (std::size_t x = 2; x < 6; ++x) gt.set(0, x, true);
    EXPECT_DOUBLE_EQ(region_similarity(pred, gt), 1.0 / 3.0);
}

TEST(RegionSimilarity, EmptyCases) {
    const BinaryMask empty(8, 8), full(8, 8, 1);
    EXPECT_DOUBLE_EQ(region_similarity(empty, empty), 1.0);
    EXPECT_DOUBLE_EQ(region_similarity(empty, full), 0.0);
    EXPECT_DOUBLE_EQ(region_similarity(full, full), 1.0);
    EXPECT_THROW(region_similarity(empty, BinaryMask(8, 9)), ShapeError);
}

TEST(RegionSimilarity, SymmetricAndBounded) {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const BinaryMask a = random_blob_mask(16, 20, rng), b = random_blob_mask(16, 20, rng);
        const double j = region_similarity(a, b);
        EXPECT_GE(j, 0.0);
        EXPECT_LE(j, 1.0);
        EXPECT_DOUBLE_EQ(j, region_similarity(b, a));
        EXPECT_DOUBLE_EQ(region_similarity(a, a), 1.0);
    }
}

TEST(BoundaryF, ImageEdgeCountsAsOutside) {
    const BinaryMask full(4, 5, 1);
    const BinaryMask b = boundary_map(full);
    EXPECT_EQ(b.count(), 4u * 5u - 2u * 3u);
    EXPECT_FALSE(b(1, 2));
    EXPECT_TRUE(b(0, 2));
}

TEST(BoundaryF, MatchesBruteForceMatcher) {
    Rng rng(2);
    for (int i = 0; i < 300; ++i) {
        const std::size_t h = 8 + rng() % 20, w = 8 + rng() % 20;
        const BinaryMask a = random_blob_mask(h, w, rng), b = random_blob_mask(h, w, rng);
        const long tol = long(rng() % 4);
        ASSERT_NEAR(boundary_f(a, b, std::size_t(tol)), brute_force_f(a, b, tol), 1e-12) << "case " << i;
    }
}

TEST(BoundaryF, EmptyAndPerfectCases) {
    const BinaryMask empty(10, 10);
    Rng rng(3);
    const BinaryMask m = random_blob_mask(10, 10, rng);
    EXPECT_DOUBLE_EQ(boundary_f(empty, empty), 1.0);
    EXPECT_DOUBLE_EQ(boundary_f(empty, m), 0.0);
    EXPECT_DOUBLE_EQ(boundary_f(m, empty), 0.0);
    EXPECT_DOUBLE_EQ(boundary_f(m, m, 0), 1.0);
}

TEST(BoundaryF, ShiftWithinToleranceIsPerfect) {
    BinaryMask a(32, 32), b(32, 32);
    for (std::size_t y = 8; y < 20; ++y)
        for (std::size_t x = 8; x < 20; ++x) {
            a.set(y, x, true);
            b.set(y + 1, x + 1, true);
        }
    EXPECT_DOUBLE_EQ(boundary_f(a, b, 1), 1.0);
    EXPECT_LT(boundary_f(a, b, 0), 1.0);
}

TEST(BoundaryF, DefaultToleranceFollowsDiagonal) {
    EXPECT_EQ(default_boundary_tolerance(64, 64), 1u);
    EXPECT_EQ(default_boundary_tolerance(480, 854), 8u);
    EXPECT_EQ(default_boundary_tolerance(512, 512), 6u);
}

TEST(Mae, Identities) {
    Rng rng(4);
    const BinaryMask gt = random_blob_mask(12, 12, rng);
    const auto p = as_prob(gt);
    EXPECT_DOUBLE_EQ(mae(p, gt), 0.0);
    std::vector<float> inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[i] = 1.0f - p[i];
    EXPECT_DOUBLE_EQ(mae(inv, gt), 1.0);
    EXPECT_DOUBLE_EQ(mae(std::vector<float>(p.size(), 0.5f), gt), 0.5);
    EXPECT_THROW(mae(std::vector<float>(3, 0.5f), gt), ShapeError);
}

TEST(FBeta, PerfectPredictionReachesOne) {
    Rng rng(5);
    const BinaryMask gt = random_blob_mask(16, 16, rng);
    EXPECT_DOUBLE_EQ(f_beta_max(as_prob(gt), gt), 1.0);
}

TEST(FBeta, ThresholdSweepMatchesOracle) {
    Rng rng(6);
    const BinaryMask gt = random_blob_mask(16, 16, rng);
    std::vector<float> p(gt.size());
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : p) v = u(rng);
    const auto curve = f_beta_curve(p, gt);
    for (std::size_t k : {0u, 1u, 100u, 127u, 254u}) {
        const double t = double(k) / 254.0;
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const bool on = p[i] >= t, g = gt.values()[i];
            tp += on && g;
            fp += on && !g;
            fn += !on && g;
        }
        const double prec = tp + fp > 0 ? tp / (tp + fp) : 0, rec = tp + fn > 0 ? tp / (tp + fn) : 0;
        const double f = prec + rec > 0 ? 1.3 * prec * rec / (0.3 * prec + rec) : 0;
        EXPECT_NEAR(curve[k], f, 1e-12) << k;
    }
}

TEST(FBeta, EmptyGroundTruthScoresZero) {
    const BinaryMask gt(4, 4);
    EXPECT_DOUBLE_EQ(f_beta_max(std::vector<float>(16, 0.9f), gt), 0.0);
}

TEST(SequenceEvaluator, AveragesFramesAndProbabilities) {
    SequenceEvaluator ev("seq", 0);
    BinaryMask pred(1, 6), gt(1, 6);
    for (std::size_t x = 0; x < 4; ++x) pred.set(0, x, true);
    for (std::size_t x = 2; x < 6; ++x) gt.set(0, x, true);
    ev.add(pred, gt);
    ev.add(gt, gt);
    ev.add_probability(as_prob(gt), gt);
    const auto r = ev.report();
    EXPECT_EQ(r.frames.size(), 2u);
    EXPECT_DOUBLE_EQ(r.j, (1.0 / 3.0 + 1.0) / 2);
    EXPECT_DOUBLE_EQ(r.g, (r.j + r.f) / 2);
    ASSERT_TRUE(r.mae.has_value());
    EXPECT_DOUBLE_EQ(*r.mae, 0.0);
    EXPECT_DOUBLE_EQ(*r.f_beta_max, 1.0);
    EXPECT_FALSE(SequenceEvaluator("x").report().mae.has_value());
}
