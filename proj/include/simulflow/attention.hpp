#pragma once

// Asymmetric image/motion attention with coarse-mask modulation.
//
// The motion branch is plain self-attention over motion tokens. The image
// branch attends over the concatenated image and motion keys, and its
// scaled logits are multiplied by Sigmoid of the stage's coarse mask
// (pooled onto the key grid and tiled over both key blocks) before the
// softmax. Projection weights are shared by the two streams.

#include "nn.hpp"

#include <optional>

namespace simulflow {

enum class MaskMode { soft, hard };

inline const char* to_string(MaskMode mode) { return mode == MaskMode::soft ? "soft" : "hard"; }

inline MaskMode parse_mask_mode(const std::string& s) {
    if (s == "soft") return MaskMode::soft;
    if (s == "hard") return MaskMode::hard;
    throw ConfigError("unknown mask mode: " + s);
}

struct AttentionConfig {
    std::size_t channels = 0;
    std::size_t num_heads = 1;
    std::size_t sr_ratio = 1;
    bool cross_enabled = true;
    bool mask_enabled = true;
    MaskMode mask_mode = MaskMode::soft;

    std::size_t head_dim() const { return channels / num_heads; }

    void validate() const {
        if (channels == 0 || num_heads == 0 || channels % num_heads != 0) {
            throw ConfigError("attention: channels " + std::to_string(channels) + " not divisible by heads " +
                              std::to_string(num_heads));
        }
        if (sr_ratio == 0) throw ConfigError("attention: sr_ratio must be >= 1");
    }
};

/// [N x C] -> [heads x N x C/heads]
template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& tokens, std::size_t heads) {
    const std::size_t n = tokens.dim(0), c = tokens.dim(1);
    return transpose(reshape(tokens, {n, heads, c / heads}), {1, 0, 2});
}

/// [heads x N x d] -> [N x heads*d]
template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x) {
    const std::size_t heads = x.dim(0), n = x.dim(1), d = x.dim(2);
    return reshape(transpose(x, {1, 0, 2}), {n, heads * d});
}

/// Scaled logits X = Q K^T / sqrt(d) for per-head Q[h x Nq x d], K[h x Nk x d].
template <typename T>
BasicTensor<T> correlation_map(const BasicTensor<T>& q, const BasicTensor<T>& k) {
    if (q.rank() != 3 || k.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
        throw ShapeError("correlation_map: Q " + shape_str(q.shape()) + " vs K " + shape_str(k.shape()));
    }
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
    return scale(matmul(q, transpose(k, {0, 2, 1})), inv_sqrt_d);
}

/// Softmax(Q K^T / sqrt(d)) V with heads re-merged: returns [Nq x C].
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v) {
    if (v.rank() != 3 || v.dim(0) != k.dim(0) || v.dim(1) != k.dim(1)) {
        throw ShapeError("attention: K " + shape_str(k.shape()) + " vs V " + shape_str(v.shape()));
    }
    return merge_heads(matmul(softmax(correlation_map(q, k), 2), v));
}

/// Coarse-mask logits pooled onto the key grid of a stage (area average for
/// sr > 1) and repeated once per key block. Returns shape [blocks * h/sr * w/sr].
template <typename T>
BasicTensor<T> key_mask_logits(const BasicTensor<T>& coarse, std::size_t sr_ratio, std::size_t blocks) {
    if (coarse.rank() != 2) throw ShapeError("key_mask_logits: coarse mask must be [H x W]");
    const std::size_t h = coarse.dim(0), w = coarse.dim(1);
    BasicTensor<T> pooled = reshape(coarse, {1, h, w});
    if (sr_ratio > 1) pooled = avg_pool2d(pooled, sr_ratio, sr_ratio);
    BasicTensor<T> flat = reshape(pooled, {pooled.numel()});
    if (blocks == 1) return flat;
    return concat(std::vector<BasicTensor<T>>(blocks, flat), 0);
}

/// Binary key gate 1[Sigmoid(s) >= 0.5]; an all-background gate keeps every key.
template <typename T>
std::vector<std::uint8_t> hard_key_gate(const BasicTensor<T>& key_logits) {
    std::vector<std::uint8_t> keep(key_logits.numel());
    bool any = false;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        keep[i] = sigmoid_scalar(key_logits.data()[i]) >= T(0.5) ? 1 : 0;
        any = any || keep[i];
    }
    if (!any) std::fill(keep.begin(), keep.end(), std::uint8_t{1});
    return keep;
}

template <typename T>
struct QKV {
    BasicTensor<T> q;  // [heads x N x d]
    BasicTensor<T> k;  // [heads x M x d]
    BasicTensor<T> v;  // [heads x M x d]
};

/// Mean image-branch attention weight per key, accumulated for inspection.
struct AttentionTrace {
    std::vector<double> key_weights;
    std::size_t key_h = 0;
    std::size_t key_w = 0;
    std::size_t key_blocks = 0;
    std::size_t count = 0;
};

template <typename T>
class SimulFlowAttention {
public:
    SimulFlowAttention() = default;
    SimulFlowAttention(BasicParamRegistry<T>& registry, const std::string& prefix, const AttentionConfig& cfg,
                       Rng& rng)
        : cfg_(cfg) {
        cfg.validate();
        const std::size_t c = cfg.channels;
        q_ = Linear<T>(registry, prefix + ".q", c, c, rng);
        k_ = Linear<T>(registry, prefix + ".k", c, c, rng);
        v_ = Linear<T>(registry, prefix + ".v", c, c, rng);
        if (cfg.sr_ratio > 1) {
            sr_ = Conv2d<T>(registry, prefix + ".sr", c, c, cfg.sr_ratio, cfg.sr_ratio, 0, rng);
            sr_norm_ = LayerNorm<T>(registry, prefix + ".sr_norm", c);
        }
        proj_ = Linear<T>(registry, prefix + ".proj", c, c, rng);
    }

    const AttentionConfig& config() const { return cfg_; }

    /// Q from the full-resolution grid; K, V from the spatially reduced grid.
    QKV<T> project_qkv(const BasicTensor<T>& tokens, std::size_t h, std::size_t w) const {
        if (tokens.rank() != 2 || tokens.dim(1) != cfg_.channels) {
            throw ShapeError("project_qkv: tokens " + shape_str(tokens.shape()) + " vs C=" +
                             std::to_string(cfg_.channels));
        }
        if (tokens.dim(0) != h * w) throw ShapeError("project_qkv: token count does not match grid");
        BasicTensor<T> kv_src = tokens;
        if (cfg_.sr_ratio > 1) {
            if (h % cfg_.sr_ratio != 0 || w % cfg_.sr_ratio != 0) {
                throw ShapeError("project_qkv: grid not divisible by sr_ratio");
            }
            kv_src = sr_norm_(map_to_tokens(sr_(tokens_to_map(tokens, h, w))));
        }
        const std::size_t heads = cfg_.num_heads;
        return {split_heads(q_(tokens), heads), split_heads(k_(kv_src), heads), split_heads(v_(kv_src), heads)};
    }

    std::size_t key_grid(std::size_t extent) const { return extent / cfg_.sr_ratio; }

    /// Image-branch logits over the union key set, after mask modulation
    /// (soft mode). Exposed for inspection of the correlation map.
    BasicTensor<T> image_logits(const QKV<T>& img, const QKV<T>& mot, const BasicTensor<T>& coarse) const {
        const BasicTensor<T> keys = cfg_.cross_enabled ? concat(std::vector{img.k, mot.k}, 1) : img.k;
        BasicTensor<T> x = correlation_map(img.q, keys);
        if (cfg_.mask_enabled && cfg_.mask_mode == MaskMode::soft) {
            x = mul(x, sigmoid(key_mask_logits(coarse, cfg_.sr_ratio, cfg_.cross_enabled ? 2 : 1)));
        }
        return x;
    }

    /// Returns (I_out, O_out), both [N x C] after the output projection.
    std::pair<BasicTensor<T>, BasicTensor<T>> operator()(const BasicTensor<T>& image_tokens,
                                                         const BasicTensor<T>& motion_tokens,
                                                         const BasicTensor<T>& coarse, std::size_t h, std::size_t w,
                                                         AttentionTrace* trace = nullptr) const {
        if (image_tokens.shape() != motion_tokens.shape()) {
            throw ShapeError("simulflow_attention: image " + shape_str(image_tokens.shape()) + " vs motion " +
                             shape_str(motion_tokens.shape()));
        }
        if (cfg_.mask_enabled && (!coarse.defined() || coarse.shape() != Shape{h, w})) {
            throw ShapeError("simulflow_attention: coarse mask does not match the " + std::to_string(h) + "x" +
                             std::to_string(w) + " grid");
        }
        const QKV<T> mot = project_qkv(motion_tokens, h, w);
        const QKV<T> img = project_qkv(image_tokens, h, w);

        BasicTensor<T> motion_out = proj_(attention(mot.q, mot.k, mot.v));

        const std::size_t blocks = cfg_.cross_enabled ? 2 : 1;
        const BasicTensor<T> values = cfg_.cross_enabled ? concat(std::vector{img.v, mot.v}, 1) : img.v;
        BasicTensor<T> weights;
        if (cfg_.mask_enabled && cfg_.mask_mode == MaskMode::hard) {
            const BasicTensor<T> keys = cfg_.cross_enabled ? concat(std::vector{img.k, mot.k}, 1) : img.k;
            const auto keep = hard_key_gate(key_mask_logits(coarse.detach(), cfg_.sr_ratio, blocks));
            weights = masked_softmax(correlation_map(img.q, keys), keep);
        } else {
            weights = softmax(image_logits(img, mot, coarse), 2);
        }
        if (trace != nullptr) record(*trace, weights, h, w, blocks);
        BasicTensor<T> image_out = proj_(merge_heads(matmul(weights, values)));
        return {image_out, motion_out};
    }

private:
    void record(AttentionTrace& trace, const BasicTensor<T>& weights, std::size_t h, std::size_t w,
                std::size_t blocks) const {
        const std::size_t keys = weights.dim(2);
        if (trace.key_weights.size() != keys) {
            trace.key_weights.assign(keys, 0.0);
            trace.count = 0;
        }
        trace.key_h = key_grid(h);
        trace.key_w = key_grid(w);
        trace.key_blocks = blocks;
        const std::size_t rows = weights.dim(0) * weights.dim(1);
        std::vector<double> acc(keys, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < keys; ++j) acc[j] += weights.data()[r * keys + j];
        }
        for (std::size_t j = 0; j < keys; ++j) trace.key_weights[j] += acc[j] / static_cast<double>(rows);
        ++trace.count;
    }

    AttentionConfig cfg_;
    Linear<T> q_, k_, v_, proj_;
    Conv2d<T> sr_;
    LayerNorm<T> sr_norm_;
};

/// 1x1 convolution from appearance tokens to a single-channel logit map [H x W].
template <typename T>
class CoarseMaskHead {
public:
    CoarseMaskHead() = default;
    CoarseMaskHead(BasicParamRegistry<T>& registry, const std::string& prefix, std::size_t channels, Rng& rng)
        : conv(registry, prefix, channels, 1, 1, 1, 0, rng) {}

    BasicTensor<T> operator()(const BasicTensor<T>& image_tokens, std::size_t h, std::size_t w) const {
        if (image_tokens.rank() != 2 || image_tokens.dim(0) != h * w) {
            throw ShapeError("coarse_mask_head: tokens " + shape_str(image_tokens.shape()) + " vs grid " +
                             std::to_string(h) + "x" + std::to_string(w));
        }
        return reshape(conv(tokens_to_map(image_tokens, h, w)), {h, w});
    }

    Conv2d<T> conv;
};

} // namespace simulflow
