#pragma once

#include "ops.hpp"

#include <map>
#include <string>
#include <unordered_map>

namespace simulflow {

/// Ordered name -> parameter map. Registration order is iteration order.
template <typename T>
class BasicParamRegistry {
public:
    using Entry = std::pair<std::string, BasicTensor<T>>;

    BasicTensor<T> add(const std::string& name, BasicTensor<T> tensor) {
        if (index_.count(name) != 0) throw ConfigError("duplicate parameter name: " + name);
        tensor.set_requires_grad(true);
        index_.emplace(name, entries_.size());
        entries_.emplace_back(name, tensor);
        return tensor;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const BasicTensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].second;
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.first);
        return out;
    }

    void zero_grad() const {
        for (const auto& e : entries_) {
            auto copy = e.second;
            copy.zero_grad();
        }
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

using ParamRegistry = BasicParamRegistry<float>;

template <typename T>
std::size_t count_params(const BasicParamRegistry<T>& registry) {
    std::size_t total = 0;
    for (const auto& [name, tensor] : registry) total += tensor.numel();
    return total;
}

/// Normal(0, std) samples rejected outside +-2 std.
template <typename T>
BasicTensor<T> truncated_normal(const Shape& shape, Rng& rng, double stddev = 0.02) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) {
        double z;
        do {
            z = dist(rng);
        } while (std::abs(z) > 2.0);
        v = static_cast<T>(z * stddev);
    }
    return BasicTensor<T>(shape, std::move(values));
}

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(BasicParamRegistry<T>& registry, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
        : weight(registry.add(prefix + ".weight", truncated_normal<T>({out, in}, rng))),
          bias(registry.add(prefix + ".bias", BasicTensor<T>::zeros({out}))) {}

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return linear(x, weight, bias); }

    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }

    BasicTensor<T> weight;
    BasicTensor<T> bias;
};

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(BasicParamRegistry<T>& registry, const std::string& prefix, std::size_t in, std::size_t out,
           std::size_t kernel, std::size_t stride_, std::size_t padding_, Rng& rng)
        : weight(registry.add(prefix + ".weight", truncated_normal<T>({out, in, kernel, kernel}, rng))),
          bias(registry.add(prefix + ".bias", BasicTensor<T>::zeros({out}))),
          stride(stride_),
          padding(padding_) {}

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

    BasicTensor<T> weight;
    BasicTensor<T> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

template <typename T>
class LayerNorm {
public:
    static constexpr double default_eps = 1e-6;

    LayerNorm() = default;
    LayerNorm(BasicParamRegistry<T>& registry, const std::string& prefix, std::size_t channels)
        : gamma(registry.add(prefix + ".weight", BasicTensor<T>::ones({channels}))),
          beta(registry.add(prefix + ".bias", BasicTensor<T>::zeros({channels}))) {}

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }

    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    double eps = default_eps;
};

/// Two-layer MLP with GELU; channel count preserved.
template <typename T>
class FeedForward {
public:
    FeedForward() = default;
    FeedForward(BasicParamRegistry<T>& registry, const std::string& prefix, std::size_t channels, std::size_t ratio,
                Rng& rng)
        : fc1(registry, prefix + ".fc1", channels, channels * ratio, rng),
          fc2(registry, prefix + ".fc2", channels * ratio, channels, rng) {}

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return fc2(gelu(fc1(x))); }

    Linear<T> fc1;
    Linear<T> fc2;
};

// [N x C] tokens on an h x w grid <-> [C x h x w] maps.
template <typename T>
BasicTensor<T> tokens_to_map(const BasicTensor<T>& tokens, std::size_t h, std::size_t w) {
    if (tokens.rank() != 2 || tokens.dim(0) != h * w) {
        throw ShapeError("tokens_to_map: " + shape_str(tokens.shape()) + " is not a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
    }
    return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

template <typename T>
BasicTensor<T> map_to_tokens(const BasicTensor<T>& map) {
    if (map.rank() != 3) throw ShapeError("map_to_tokens: expects [C x H x W]");
    return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

} // namespace simulflow
