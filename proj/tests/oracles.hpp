#pragma once

// Naive scalar-loop references used as test oracles. Everything here is
// written from the defining formulas and shares no code with the library
// kernels beyond the Tensor container.

#include "simulflow/tensor.hpp"

#include <cmath>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline Vec to_vec(const simulflow::Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

template <typename T>
Vec to_vec(const simulflow::BasicTensor<T>& t) {
    return Vec(t.data().begin(), t.data().end());
}

// C[m x n] = A[m x k] B[k x n]
inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
    Vec c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    return c;
}

// y[N x out] = x[N x in] W^T + b
inline Vec linear(const Vec& x, const Vec& w, const Vec& b, std::size_t n, std::size_t in, std::size_t out) {
    Vec y(n * out);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out; ++o) {
            double s = b.empty() ? 0.0 : b[o];
            for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[o * in + i];
            y[r * out + o] = s;
        }
    return y;
}

// Direct convolution of x[C x H x W] with w[O x C x k x k], zero padding.
inline Vec conv2d(const Vec& x, const Vec& w, const Vec& b, std::size_t c, std::size_t h, std::size_t wd,
                  std::size_t o, std::size_t k, std::size_t stride, std::size_t pad, std::size_t& oh,
                  std::size_t& ow) {
    oh = (h + 2 * pad - k) / stride + 1;
    ow = (wd + 2 * pad - k) / stride + 1;
    Vec y(o * oh * ow);
    for (std::size_t oc = 0; oc < o; ++oc)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double s = b.empty() ? 0.0 : b[oc];
                for (std::size_t ic = 0; ic < c; ++ic)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long iy = long(oy * stride + ky) - long(pad);
                            const long ix = long(ox * stride + kx) - long(pad);
                            if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                            s += x[(ic * h + iy) * wd + ix] * w[((oc * c + ic) * k + ky) * k + kx];
                        }
                y[(oc * oh + oy) * ow + ox] = s;
            }
    return y;
}

inline Vec layer_norm(const Vec& x, const Vec& g, const Vec& b, std::size_t rows, std::size_t c, double eps) {
    Vec y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < c; ++j) mu += x[r * c + j];
        mu /= double(c);
        for (std::size_t j = 0; j < c; ++j) var += std::pow(x[r * c + j] - mu, 2);
        var /= double(c);
        for (std::size_t j = 0; j < c; ++j) y[r * c + j] = g[j] * (x[r * c + j] - mu) / std::sqrt(var + eps) + b[j];
    }
    return y;
}

// Row-wise softmax over rows of length n.
inline Vec softmax_rows(const Vec& x, std::size_t n) {
    Vec y(x.size());
    for (std::size_t r = 0; r < x.size() / n; ++r) {
        double total = 0;
        for (std::size_t j = 0; j < n; ++j) total += std::exp(x[r * n + j]);
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] = std::exp(x[r * n + j]) / total;
    }
    return y;
}

inline double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }
inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Bilinear sample of one plane at continuous source coordinate (sy, sx) using
// the half-pixel convention, edges clamped.
inline double sample(const Vec& plane, std::size_t h, std::size_t w, double sy, double sx) {
    auto clampd = [](double v, double hi) { return std::min(std::max(v, 0.0), hi); };
    sy = clampd(sy, double(h - 1));
    sx = clampd(sx, double(w - 1));
    const std::size_t y0 = std::size_t(std::floor(sy)), x0 = std::size_t(std::floor(sx));
    const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = sy - double(y0), fx = sx - double(x0);
    return (1 - fy) * ((1 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1]) +
           fy * ((1 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
}

inline Vec bilinear(const Vec& x, std::size_t c, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow) {
    Vec y(c * oh * ow);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const Vec plane(x.begin() + long(ch * h * w), x.begin() + long((ch + 1) * h * w));
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const double sy = (oy + 0.5) * double(h) / double(oh) - 0.5;
                const double sx = (ox + 0.5) * double(w) / double(ow) - 0.5;
                y[(ch * oh + oy) * ow + ox] = sample(plane, h, w, sy, sx);
            }
    }
    return y;
}

/// Maximum absolute difference between two sequences.
template <typename A, typename B>
double max_abs(const A& a, const B& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

} // namespace oracle
