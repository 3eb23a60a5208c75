#pragma once

#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace simulflow {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

} // namespace detail

class Tape;

/// Dense row-major n-d array with an optional gradient slot.
///
/// Copies share storage (handle semantics) so the tape can refer to the
/// same buffers the caller holds. Use clone() or detach() for a deep copy.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl<T>>()) {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static BasicTensor zeros(const Shape& shape) { return full(shape, T(0)); }
    static BasicTensor ones(const Shape& shape) { return full(shape, T(1)); }
    static BasicTensor full(const Shape& shape, T value) {
        return BasicTensor(shape, std::vector<T>(shape_numel(shape), value));
    }
    static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

    /// Nested-list style construction for small literals in tests.
    static BasicTensor from(const Shape& shape, std::initializer_list<T> values) {
        return BasicTensor(shape, std::vector<T>(values));
    }

    template <typename Rng>
    static BasicTensor randn(const Shape& shape, Rng& rng, T stddev = T(1)) {
        std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
        std::vector<T> v(shape_numel(shape));
        for (auto& x : v) x = static_cast<T>(dist(rng));
        return BasicTensor(shape, std::move(v));
    }

    template <typename Rng>
    static BasicTensor uniform(const Shape& shape, Rng& rng, T lo, T hi) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<T> v(shape_numel(shape));
        for (auto& x : v) x = static_cast<T>(dist(rng));
        return BasicTensor(shape, std::move(v));
    }

    bool defined() const noexcept { return static_cast<bool>(impl_); }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    std::span<T> mutable_data() { return impl_->data; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    T at(std::initializer_list<std::size_t> index) const {
        if (index.size() != rank()) throw ShapeError("at(): index rank mismatch");
        std::size_t off = 0;
        std::size_t i = 0;
        for (auto idx : index) {
            if (idx >= impl_->shape[i]) throw ShapeError("at(): index out of range");
            off = off * impl_->shape[i] + idx;
            ++i;
        }
        return impl_->data[off];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    BasicTensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return impl_->leaf; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    /// Deep copy detached from any tape.
    BasicTensor detach() const { return BasicTensor(impl_->shape, impl_->data); }
    BasicTensor clone() const {
        BasicTensor out = detach();
        out.impl_->requires_grad = impl_->requires_grad;
        return out;
    }

    bool same_storage(const BasicTensor& other) const { return impl_ == other.impl_; }

    // Internal access for op implementations.
    const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
    explicit BasicTensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& src) {
    std::vector<To> v(src.numel());
    std::transform(src.data().begin(), src.data().end(), v.begin(),
                   [](From x) { return static_cast<To>(x); });
    BasicTensor<To> out(src.shape(), std::move(v));
    out.set_requires_grad(src.requires_grad());
    return out;
}

/// Ordered record of differentiable ops executed while the tape is active.
///
/// Ops record themselves only when a tape is active on the calling thread
/// (see Tape::Scope) and at least one input requires a gradient.
class Tape {
public:
    class Scope {
    public:
        explicit Scope(Tape& tape) : prev_(current()) { current() = &tape; }
        ~Scope() { current() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return current(); }

    void record(const char* name, std::function<void()> backward_fn) {
        if (consumed_) throw TapeError("recording onto a consumed tape; call reset() first");
        entries_.push_back({name, std::move(backward_fn)});
    }

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    /// Names of ops visited by the last backward pass, in visit order.
    const std::vector<const char*>& last_visit_order() const { return visited_; }

    std::vector<const char*> recorded_order() const {
        std::vector<const char*> names;
        names.reserve(entries_.size());
        for (const auto& e : entries_) names.push_back(e.name);
        return names;
    }

    template <typename T>
    void backward(const BasicTensor<T>& loss) {
        if (consumed_) throw TapeError("backward called twice on the same tape without reset()");
        if (loss.numel() != 1) throw TapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        if (entries_.empty()) throw TapeError("backward on an empty tape");
        if (!loss.requires_grad()) throw TapeError("loss does not depend on any tensor requiring grad");
        auto& impl = *loss.impl();
        impl.ensure_grad();
        impl.grad[0] += T(1);
        visited_.clear();
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            visited_.push_back(it->name);
            it->backward();
        }
        consumed_ = true;
    }

    void reset() {
        entries_.clear();
        visited_.clear();
        consumed_ = false;
    }

private:
    struct Entry {
        const char* name;
        std::function<void()> backward;
    };

    static Tape*& current() {
        thread_local Tape* tape = nullptr;
        return tape;
    }

    std::vector<Entry> entries_;
    std::vector<const char*> visited_;
    bool consumed_ = false;
};

} // namespace simulflow
