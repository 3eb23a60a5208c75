#pragma once

// Differentiable operations over BasicTensor<T>. Every op materializes its
// output and, when a tape is active and an input requires a gradient,
// records a closure that accumulates input gradients from the output's.

#include "tensor.hpp"

#include <cstdint>

namespace simulflow {

namespace detail {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
    for (const T v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
    }
}

template <typename T>
BasicTensor<T> finish(const char* op, Shape shape, std::vector<T> values) {
    check_finite(op, values);
    return BasicTensor<T>(std::move(shape), std::move(values));
}

template <typename... Ts>
Tape* tape_for(const Ts&... inputs) {
    Tape* tape = Tape::active();
    if (tape == nullptr) return nullptr;
    const bool any = (inputs.requires_grad() || ...);
    return any ? tape : nullptr;
}

template <typename T>
Tape* tape_for_list(const std::vector<BasicTensor<T>>& inputs) {
    Tape* tape = Tape::active();
    if (tape == nullptr) return nullptr;
    for (const auto& t : inputs) {
        if (t.requires_grad()) return tape;
    }
    return nullptr;
}

template <typename T>
void mark_nonleaf(BasicTensor<T>& out) {
    out.impl()->requires_grad = true;
    out.impl()->leaf = false;
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = a[p * m + i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Trailing-dimension alignment with size-1 expansion. Empty index vectors
// mean the operand already has the output layout.
struct Broadcast {
    Shape out;
    std::vector<std::size_t> ia;
    std::vector<std::size_t> ib;
};

inline std::vector<std::size_t> broadcast_index(const Shape& padded, const Shape& out) {
    const std::size_t rank = out.size();
    std::vector<std::size_t> strides(rank, 0);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
        strides[d] = padded[d] == 1 ? 0 : s;
        s *= padded[d];
    }
    const std::size_t n = shape_numel(out);
    std::vector<std::size_t> index(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        index[i] = off;
        for (std::size_t d = rank; d-- > 0;) {
            ++counter[d];
            off += strides[d];
            if (counter[d] < out[d]) break;
            off -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    return index;
}

inline Broadcast make_broadcast(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1), out(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
    for (std::size_t d = 0; d < rank; ++d) {
        if (pa[d] == pb[d] || pb[d] == 1) {
            out[d] = pa[d];
        } else if (pa[d] == 1) {
            out[d] = pb[d];
        } else {
            throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        }
    }
    Broadcast bc;
    bc.out = out;
    if (shape_numel(a) != shape_numel(out)) bc.ia = broadcast_index(pa, out);
    if (shape_numel(b) != shape_numel(out)) bc.ib = broadcast_index(pb, out);
    return bc;
}

// dx = f'(x, y) * dy, elementwise
template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary_op(const char* name, const BasicTensor<T>& x, Fwd fwd, Deriv deriv) {
    std::vector<T> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    auto result = finish(name, x.shape(), std::move(out));
    if (Tape* tape = tape_for(x)) {
        mark_nonleaf(result);
        tape->record(name, [xi = x.impl(), oi = result.impl(), deriv] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < xi->data.size(); ++i) {
                xi->grad[i] += deriv(xi->data[i], oi->data[i]) * oi->grad[i];
            }
        });
    }
    return result;
}

template <typename T, typename Fwd, typename DA, typename DB>
BasicTensor<T> binary_op(const char* name, const BasicTensor<T>& a, const BasicTensor<T>& b, Fwd fwd, DA da,
                         DB db) {
    auto bc = make_broadcast(a.shape(), b.shape());
    const std::size_t n = shape_numel(bc.out);
    std::vector<T> out(n);
    const auto av = a.data();
    const auto bv = b.data();
    const bool ida = bc.ia.empty();
    const bool idb = bc.ib.empty();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = fwd(av[ida ? i : bc.ia[i]], bv[idb ? i : bc.ib[i]]);
    }
    auto result = finish(name, bc.out, std::move(out));
    if (Tape* tape = tape_for(a, b)) {
        mark_nonleaf(result);
        tape->record(name, [ai = a.impl(), bi = b.impl(), oi = result.impl(), ia = std::move(bc.ia),
                            ib = std::move(bc.ib), da, db] {
            if (oi->grad.empty()) return;
            const bool ida = ia.empty();
            const bool idb = ib.empty();
            if (ai->requires_grad) ai->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            for (std::size_t i = 0; i < oi->data.size(); ++i) {
                const std::size_t ja = ida ? i : ia[i];
                const std::size_t jb = idb ? i : ib[i];
                const T g = oi->grad[i];
                if (ai->requires_grad) ai->grad[ja] += da(ai->data[ja], bi->data[jb]) * g;
                if (bi->requires_grad) bi->grad[jb] += db(ai->data[ja], bi->data[jb]) * g;
            }
        });
    }
    return result;
}

struct AxisSplit {
    std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
    return s;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
    return detail::unary_op<T>(
        "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T offset) {
    return detail::unary_op<T>(
        "add_scalar", x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
T sigmoid_scalar(T v) {
    if (v >= 0) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    return detail::unary_op<T>(
        "sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

/// Exact (erf-based) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_op<T>(
        "gelu", x,
        [](T v) { return static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2))); },
        [](T v, T) {
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * double(v) * v);
            return static_cast<T>(cdf + v * pdf);
        });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
    return detail::unary_op<T>(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
    return detail::unary_op<T>(
        "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// 2-D product, or batched 3-D product with a shared leading batch extent.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    std::size_t batch = 1, m = 0, k = 0, n = 0;
    Shape out_shape;
    if (a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0)) {
        m = a.dim(0);
        k = a.dim(1);
        n = b.dim(1);
        out_shape = {m, n};
    } else if (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1)) {
        batch = a.dim(0);
        m = a.dim(1);
        k = a.dim(2);
        n = b.dim(2);
        out_shape = {batch, m, n};
    } else {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    std::vector<T> out(batch * m * n, T(0));
    for (std::size_t bi = 0; bi < batch; ++bi) {
        detail::gemm_nn(a.data().data() + bi * m * k, b.data().data() + bi * k * n, out.data() + bi * m * n, m, k,
                        n);
    }
    auto result = detail::finish("matmul", std::move(out_shape), std::move(out));
    if (Tape* tape = detail::tape_for(a, b)) {
        detail::mark_nonleaf(result);
        tape->record("matmul", [ai = a.impl(), bi_ = b.impl(), oi = result.impl(), batch, m, k, n] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) ai->ensure_grad();
            if (bi_->requires_grad) bi_->ensure_grad();
            for (std::size_t bb = 0; bb < batch; ++bb) {
                const T* dc = oi->grad.data() + bb * m * n;
                if (ai->requires_grad) {
                    detail::gemm_nt(dc, bi_->data.data() + bb * k * n, ai->grad.data() + bb * m * k, m, n, k);
                }
                if (bi_->requires_grad) {
                    detail::gemm_tn(ai->data.data() + bb * m * k, dc, bi_->grad.data() + bb * k * n, k, m, n);
                }
            }
        });
    }
    return result;
}

/// y = x W^T + b for token matrices x[N x C_in], W[C_out x C_in], b[C_out].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    const std::size_t rows = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs C_out " + std::to_string(cout));
    }
    std::vector<T> out(rows * cout, T(0));
    if (has_bias) {
        for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * cout);
    }
    detail::gemm_nt(x.data().data(), weight.data().data(), out.data(), rows, cin, cout);
    auto result = detail::finish("linear", {rows, cout}, std::move(out));
    const bool needs = has_bias ? detail::tape_for(x, weight, bias) != nullptr : detail::tape_for(x, weight) != nullptr;
    if (needs) {
        detail::mark_nonleaf(result);
        Tape::active()->record("linear", [xi = x.impl(), wi = weight.impl(),
                                          bi = has_bias ? bias.impl() : detail::ImplPtr<T>{}, oi = result.impl(),
                                          rows, cin, cout] {
            if (oi->grad.empty()) return;
            const T* dy = oi->grad.data();
            if (xi->requires_grad) {
                xi->ensure_grad();
                detail::gemm_nn(dy, wi->data.data(), xi->grad.data(), rows, cout, cin);
            }
            if (wi->requires_grad) {
                wi->ensure_grad();
                detail::gemm_tn(dy, xi->data.data(), wi->grad.data(), cout, rows, cin);
            }
            if (bi && bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cout; ++c) bi->grad[c] += dy[r * cout + c];
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Softmax

/// Max-subtracted softmax along `axis`.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis);
    std::vector<T> out(x.numel());
    const auto in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            T mx = in[base];
            for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, in[base + l * s.inner]);
            double total = 0;
            for (std::size_t l = 0; l < s.len; ++l) {
                const T e = std::exp(in[base + l * s.inner] - mx);
                out[base + l * s.inner] = e;
                total += e;
            }
            for (std::size_t l = 0; l < s.len; ++l) {
                out[base + l * s.inner] = static_cast<T>(out[base + l * s.inner] / total);
            }
        }
    }
    auto result = detail::finish("softmax", x.shape(), std::move(out));
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("softmax", [xi = x.impl(), oi = result.impl(), s] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            const auto& y = oi->data;
            const auto& dy = oi->grad;
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const std::size_t base = o * s.len * s.inner + i;
                    double dot = 0;
                    for (std::size_t l = 0; l < s.len; ++l) {
                        const std::size_t j = base + l * s.inner;
                        dot += double(y[j]) * dy[j];
                    }
                    for (std::size_t l = 0; l < s.len; ++l) {
                        const std::size_t j = base + l * s.inner;
                        xi->grad[j] += static_cast<T>(y[j] * (dy[j] - dot));
                    }
                }
            }
        });
    }
    return result;
}

/// Softmax over the last axis where positions with keep[j] == 0 receive
/// zero weight (logits treated as -inf). Every row needs one kept position.
template <typename T>
BasicTensor<T> masked_softmax(const BasicTensor<T>& x, const std::vector<std::uint8_t>& keep) {
    const std::size_t len = x.shape().back();
    if (keep.size() != len) throw ShapeError("masked_softmax: keep mask length mismatch");
    if (std::none_of(keep.begin(), keep.end(), [](std::uint8_t k) { return k != 0; })) {
        throw NumericError("masked_softmax: every position is masked out");
    }
    const std::size_t rows = x.numel() / len;
    std::vector<T> out(x.numel(), T(0));
    const auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * len;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t l = 0; l < len; ++l) {
            if (keep[l]) mx = std::max(mx, row[l]);
        }
        double total = 0;
        for (std::size_t l = 0; l < len; ++l) {
            if (!keep[l]) continue;
            const T e = std::exp(row[l] - mx);
            out[r * len + l] = e;
            total += e;
        }
        for (std::size_t l = 0; l < len; ++l) out[r * len + l] = static_cast<T>(out[r * len + l] / total);
    }
    auto result = detail::finish("masked_softmax", x.shape(), std::move(out));
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("masked_softmax", [xi = x.impl(), oi = result.impl(), rows, len] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            const auto& y = oi->data;
            const auto& dy = oi->grad;
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0;
                for (std::size_t l = 0; l < len; ++l) dot += double(y[r * len + l]) * dy[r * len + l];
                for (std::size_t l = 0; l < len; ++l) {
                    const std::size_t j = r * len + l;
                    xi->grad[j] += static_cast<T>(y[j] * (dy[j] - dot));
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    auto result = BasicTensor<T>(shape, std::move(out));
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("reshape", [xi = x.impl(), oi = result.impl()] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return result;
}

/// Materialized axis permutation: out.shape[d] = x.shape[perm[d]].
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t rank = x.rank();
    if (perm.size() != rank) throw ShapeError("transpose: permutation rank mismatch");
    std::vector<bool> seen(rank, false);
    Shape out_shape(rank);
    for (std::size_t d = 0; d < rank; ++d) {
        if (perm[d] >= rank || seen[perm[d]]) throw ShapeError("transpose: invalid permutation");
        seen[perm[d]] = true;
        out_shape[d] = x.dim(perm[d]);
    }
    std::vector<std::size_t> in_strides(rank);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
        in_strides[d] = s;
        s *= x.dim(d);
    }
    // source offset for each destination element
    std::vector<std::size_t> src(x.numel());
    std::vector<std::size_t> counter(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        src[i] = off;
        for (std::size_t d = rank; d-- > 0;) {
            ++counter[d];
            off += in_strides[perm[d]];
            if (counter[d] < out_shape[d]) break;
            off -= in_strides[perm[d]] * out_shape[d];
            counter[d] = 0;
        }
    }
    std::vector<T> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[src[i]];
    auto result = BasicTensor<T>(std::move(out_shape), std::move(out));
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("transpose", [xi = x.impl(), oi = result.impl(), src = std::move(src)] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < src.size(); ++i) xi->grad[src[i]] += oi->grad[i];
        });
    }
    return result;
}

/// Swap the two axes of a matrix.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose(): expects a matrix, got " + shape_str(x.shape()));
    return transpose(x, {1, 0});
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    const auto s = detail::split_axis(x.shape(), axis);
    if (length == 0 || start + length > s.len) throw ShapeError("slice: range out of bounds");
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<T> out(s.outer * length * s.inner);
    const auto in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * s.len + start) * s.inner), length * s.inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
    }
    auto result = BasicTensor<T>(std::move(out_shape), std::move(out));
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("slice", [xi = x.impl(), oi = result.impl(), s, start, length] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t o = 0; o < s.outer; ++o) {
                const T* g = oi->grad.data() + o * length * s.inner;
                T* dst = xi->grad.data() + (o * s.len + start) * s.inner;
                for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += g[i];
            }
        });
    }
    return result;
}

template <typename T>
std::vector<BasicTensor<T>> split(const BasicTensor<T>& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
    const auto s = detail::split_axis(x.shape(), axis);
    if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != s.len) {
        throw ShapeError("split: sizes do not cover axis of " + shape_str(x.shape()));
    }
    std::vector<BasicTensor<T>> parts;
    std::size_t start = 0;
    for (auto len : sizes) {
        parts.push_back(slice(x, axis, start, len));
        start += len;
    }
    return parts;
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
    std::size_t total = 0;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != axis && p.dim(d) != ref[d]) {
                throw ShapeError("concat: extent mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
            }
        }
        lens.push_back(p.dim(axis));
        total += p.dim(axis);
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    const auto s = detail::split_axis(out_shape, axis);
    std::vector<T> out(shape_numel(out_shape));
    std::size_t start = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto in = parts[k].data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * s.inner), lens[k] * s.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total + start) * s.inner));
        }
        start += lens[k];
    }
    auto result = BasicTensor<T>(std::move(out_shape), std::move(out));
    if (Tape* tape = detail::tape_for_list(parts)) {
        detail::mark_nonleaf(result);
        std::vector<detail::ImplPtr<T>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        tape->record("concat", [impls = std::move(impls), oi = result.impl(), lens, s, total] {
            if (oi->grad.empty()) return;
            std::size_t start = 0;
            for (std::size_t k = 0; k < impls.size(); ++k) {
                auto& pi = *impls[k];
                if (pi.requires_grad) {
                    pi.ensure_grad();
                    for (std::size_t o = 0; o < s.outer; ++o) {
                        const T* g = oi->grad.data() + (o * total + start) * s.inner;
                        T* dst = pi.grad.data() + o * lens[k] * s.inner;
                        for (std::size_t i = 0; i < lens[k] * s.inner; ++i) dst[i] += g[i];
                    }
                }
                start += lens[k];
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    double total = 0;
    for (const T v : x.data()) total += v;
    auto result = detail::finish<T>("sum", {1}, {static_cast<T>(total)});
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("sum", [xi = x.impl(), oi = result.impl()] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (auto& g : xi->grad) g += oi->grad[0];
        });
    }
    return result;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum over one axis; the axis is removed (a rank-1 input yields shape [1]).
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis);
    Shape out_shape;
    for (std::size_t d = 0; d < x.rank(); ++d) {
        if (d != axis) out_shape.push_back(x.dim(d));
    }
    if (out_shape.empty()) out_shape = {1};
    std::vector<T> out(s.outer * s.inner);
    const auto in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            double acc = 0;
            for (std::size_t l = 0; l < s.len; ++l) acc += in[(o * s.len + l) * s.inner + i];
            out[o * s.inner + i] = static_cast<T>(acc);
        }
    }
    auto result = detail::finish("sum_axis", std::move(out_shape), std::move(out));
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("sum_axis", [xi = x.impl(), oi = result.impl(), s] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t l = 0; l < s.len; ++l) {
                    for (std::size_t i = 0; i < s.inner; ++i) {
                        xi->grad[(o * s.len + l) * s.inner + i] += oi->grad[o * s.inner + i];
                    }
                }
            }
        });
    }
    return result;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, std::size_t axis) {
    const std::size_t len = x.dim(axis);
    return scale(sum(x, axis), T(1) / static_cast<T>(len));
}

// ---------------------------------------------------------------------------
// Spatial ops on [C x H x W] maps

namespace detail {

struct LerpTap {
    std::size_t i0, i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel-centre sampling (align_corners = false), clamped at borders.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
    std::vector<LerpTap> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<std::size_t>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

} // namespace detail

template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 3) throw ShapeError("bilinear_resize: expects [C x H x W], got " + shape_str(x.shape()));
    if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: zero output extent");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto ty = detail::lerp_taps(h, out_h);
    const auto tx = detail::lerp_taps(w, out_w);
    std::vector<T> out(c * out_h * out_w);
    const auto in = x.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* plane = in.data() + ch * h * w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto& b = tx[ox];
                const double top = plane[a.i0 * w + b.i0] * (1 - b.w1) + plane[a.i0 * w + b.i1] * b.w1;
                const double bot = plane[a.i1 * w + b.i0] * (1 - b.w1) + plane[a.i1 * w + b.i1] * b.w1;
                out[(ch * out_h + oy) * out_w + ox] = static_cast<T>(top * (1 - a.w1) + bot * a.w1);
            }
        }
    }
    auto result = detail::finish("bilinear_resize", {c, out_h, out_w}, std::move(out));
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("bilinear_resize", [xi = x.impl(), oi = result.impl(), ty, tx, c, h, w, out_h, out_w] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t ch = 0; ch < c; ++ch) {
                T* gp = xi->grad.data() + ch * h * w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto& a = ty[oy];
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto& b = tx[ox];
                        const double g = oi->grad[(ch * out_h + oy) * out_w + ox];
                        gp[a.i0 * w + b.i0] += static_cast<T>(g * (1 - a.w1) * (1 - b.w1));
                        gp[a.i0 * w + b.i1] += static_cast<T>(g * (1 - a.w1) * b.w1);
                        gp[a.i1 * w + b.i0] += static_cast<T>(g * a.w1 * (1 - b.w1));
                        gp[a.i1 * w + b.i1] += static_cast<T>(g * a.w1 * b.w1);
                    }
                }
            }
        });
    }
    return result;
}

/// Unpadded average pooling with a square window.
template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride) {
    if (x.rank() != 3) throw ShapeError("avg_pool2d: expects [C x H x W], got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (kernel == 0 || stride == 0 || kernel > h || kernel > w) throw ShapeError("avg_pool2d: invalid window");
    const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
    const double inv = 1.0 / static_cast<double>(kernel * kernel);
    std::vector<T> out(c * oh * ow);
    const auto in = x.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = 0;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        acc += in[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = static_cast<T>(acc * inv);
            }
        }
    }
    auto result = detail::finish("avg_pool2d", {c, oh, ow}, std::move(out));
    if (Tape* tape = detail::tape_for(x)) {
        detail::mark_nonleaf(result);
        tape->record("avg_pool2d", [xi = x.impl(), oi = result.impl(), c, h, w, oh, ow, kernel, stride, inv] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const T g = static_cast<T>(oi->grad[(ch * oh + oy) * ow + ox] * inv);
                        for (std::size_t ky = 0; ky < kernel; ++ky) {
                            for (std::size_t kx = 0; kx < kernel; ++kx) {
                                xi->grad[(ch * h + oy * stride + ky) * w + ox * stride + kx] += g;
                            }
                        }
                    }
                }
            }
        });
    }
    return result;
}

/// Cross-correlation of x[C_in x H x W] with weight[C_out x C_in x k x k],
/// zero padding, via an explicit column buffer.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      std::size_t stride, std::size_t padding) {
    if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(0) || weight.dim(2) != weight.dim(3)) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    const auto span_h = static_cast<std::ptrdiff_t>(h + 2 * padding) - static_cast<std::ptrdiff_t>(k);
    const auto span_w = static_cast<std::ptrdiff_t>(w + 2 * padding) - static_cast<std::ptrdiff_t>(k);
    if (span_h < 0 || span_w < 0) {
        throw ShapeError("conv2d: degenerate output extent for input " + shape_str(x.shape()) + " and kernel " +
                         std::to_string(k));
    }
    const std::size_t oh = static_cast<std::size_t>(span_h) / stride + 1;
    const std::size_t ow = static_cast<std::size_t>(span_w) / stride + 1;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) throw ShapeError("conv2d: bias extent mismatch");

    const std::size_t rows = cin * k * k, cols = oh * ow;
    // col[(ci,ky,kx) x (oy,ox)] holds source offsets, or npos for padding
    constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::vector<std::size_t> src(rows * cols, npos);
    for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t r = (ci * k + ky) * k + kx;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        src[r * cols + oy * ow + ox] = (ci * h + static_cast<std::size_t>(iy)) * w +
                                                       static_cast<std::size_t>(ix);
                    }
                }
            }
        }
    }
    std::vector<T> col(rows * cols, T(0));
    const auto in = x.data();
    for (std::size_t i = 0; i < col.size(); ++i) {
        if (src[i] != npos) col[i] = in[src[i]];
    }
    std::vector<T> out(cout * cols, T(0));
    if (has_bias) {
        for (std::size_t co = 0; co < cout; ++co) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(co * cols), cols, bias.data()[co]);
    }
    detail::gemm_nn(weight.data().data(), col.data(), out.data(), cout, rows, cols);
    auto result = detail::finish("conv2d", {cout, oh, ow}, std::move(out));
    const bool needs = has_bias ? detail::tape_for(x, weight, bias) != nullptr : detail::tape_for(x, weight) != nullptr;
    if (needs) {
        detail::mark_nonleaf(result);
        Tape::active()->record("conv2d", [xi = x.impl(), wi = weight.impl(),
                                          bi = has_bias ? bias.impl() : detail::ImplPtr<T>{}, oi = result.impl(),
                                          src = std::move(src), col = std::move(col), rows, cols, cout] {
            if (oi->grad.empty()) return;
            const T* dy = oi->grad.data();
            if (wi->requires_grad) {
                wi->ensure_grad();
                detail::gemm_nt(dy, col.data(), wi->grad.data(), cout, cols, rows);
            }
            if (bi && bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t co = 0; co < cout; ++co) {
                    double acc = 0;
                    for (std::size_t j = 0; j < cols; ++j) acc += dy[co * cols + j];
                    bi->grad[co] += static_cast<T>(acc);
                }
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                std::vector<T> dcol(rows * cols, T(0));
                detail::gemm_tn(wi->data.data(), dy, dcol.data(), rows, cout, cols);
                for (std::size_t i = 0; i < dcol.size(); ++i) {
                    if (src[i] != static_cast<std::size_t>(-1)) xi->grad[src[i]] += dcol[i];
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-row normalization of x[N x C] followed by gamma * x_hat + beta.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps) {
    if (x.rank() != 2 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1)) {
        throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " vs affine " + shape_str(gamma.shape()));
    }
    const std::size_t rows = x.dim(0), c = x.dim(1);
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(rows);
    const auto in = x.data();
    const auto g = gamma.data();
    const auto b = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * c;
        double mu = 0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<T>(is);
        for (std::size_t j = 0; j < c; ++j) {
            const T xh = static_cast<T>((row[j] - mu) * is);
            xhat[r * c + j] = xh;
            out[r * c + j] = g[j] * xh + b[j];
        }
    }
    auto result = detail::finish("layer_norm", x.shape(), std::move(out));
    if (Tape* tape = detail::tape_for(x, gamma, beta)) {
        detail::mark_nonleaf(result);
        tape->record("layer_norm", [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = result.impl(),
                                    xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c] {
            if (oi->grad.empty()) return;
            const auto& dy = oi->grad;
            if (gi->requires_grad) gi->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            if (xi->requires_grad) xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                double sum_dxh = 0, sum_dxh_xh = 0;
                for (std::size_t j = 0; j < c; ++j) {
                    const std::size_t i = r * c + j;
                    if (gi->requires_grad) gi->grad[j] += dy[i] * xhat[i];
                    if (bi->requires_grad) bi->grad[j] += dy[i];
                    const double dxh = double(dy[i]) * gi->data[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[i];
                }
                if (!xi->requires_grad) continue;
                const double inv_c = 1.0 / static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    const std::size_t i = r * c + j;
                    const double dxh = double(dy[i]) * gi->data[j];
                    xi->grad[i] +=
                        static_cast<T>(inv_std[r] * (dxh - inv_c * sum_dxh - xhat[i] * inv_c * sum_dxh_xh));
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean per-pixel cross-entropy of logits[K x P...] against integer class
/// labels (one per pixel, stored as values 0..K-1).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<std::uint8_t>& labels) {
    if (logits.rank() < 2) throw ShapeError("cross_entropy: logits need a class axis");
    const std::size_t classes = logits.dim(0);
    const std::size_t pixels = logits.numel() / classes;
    if (labels.size() != pixels) throw ShapeError("cross_entropy: label count mismatch");
    const auto z = logits.data();
    std::vector<T> probs(logits.numel());
    double total = 0;
    for (std::size_t p = 0; p < pixels; ++p) {
        if (labels[p] >= classes) throw ShapeError("cross_entropy: label out of range");
        T mx = z[p];
        for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, z[k * pixels + p]);
        double se = 0;
        for (std::size_t k = 0; k < classes; ++k) se += std::exp(double(z[k * pixels + p]) - mx);
        const double lse = mx + std::log(se);
        total += lse - z[labels[p] * pixels + p];
        for (std::size_t k = 0; k < classes; ++k) {
            probs[k * pixels + p] = static_cast<T>(std::exp(double(z[k * pixels + p]) - lse));
        }
    }
    auto result = detail::finish<T>("cross_entropy", {1}, {static_cast<T>(total / static_cast<double>(pixels))});
    if (Tape* tape = detail::tape_for(logits)) {
        detail::mark_nonleaf(result);
        tape->record("cross_entropy", [li = logits.impl(), oi = result.impl(), probs = std::move(probs), labels,
                                       classes, pixels] {
            if (oi->grad.empty()) return;
            li->ensure_grad();
            const T g = oi->grad[0] / static_cast<T>(pixels);
            for (std::size_t k = 0; k < classes; ++k) {
                for (std::size_t p = 0; p < pixels; ++p) {
                    const T onehot = labels[p] == k ? T(1) : T(0);
                    li->grad[k * pixels + p] += (probs[k * pixels + p] - onehot) * g;
                }
            }
        });
    }
    return result;
}

/// Mean binary cross-entropy of Sigmoid(logits) against soft targets in [0, 1].
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const std::vector<T>& targets) {
    if (targets.size() != logits.numel()) throw ShapeError("bce_with_logits: target count mismatch");
    const auto z = logits.data();
    double total = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double x = z[i];
        total += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    const std::size_t n = targets.size();
    auto result = detail::finish<T>("bce_with_logits", {1}, {static_cast<T>(total / static_cast<double>(n))});
    if (Tape* tape = detail::tape_for(logits)) {
        detail::mark_nonleaf(result);
        tape->record("bce_with_logits", [li = logits.impl(), oi = result.impl(), targets, n] {
            if (oi->grad.empty()) return;
            li->ensure_grad();
            const T g = oi->grad[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) li->grad[i] += (sigmoid_scalar(li->data[i]) - targets[i]) * g;
        });
    }
    return result;
}

} // namespace simulflow
