#pragma once

#include "attention.hpp"

#include <array>

namespace simulflow {

inline constexpr std::size_t num_stages = 4;

template <typename V>
using PerStage = std::array<V, num_stages>;

/// Full architecture description.
struct ModelConfig {
    std::string name = "tiny";
    std::size_t height = 64;
    std::size_t width = 64;
    PerStage<std::size_t> depths{1, 1, 1, 1};
    PerStage<std::size_t> channels{16, 32, 64, 128};
    PerStage<std::size_t> heads{1, 1, 2, 4};
    PerStage<std::size_t> sr_ratios{4, 2, 1, 1};
    PerStage<bool> cross_enabled{true, true, true, true};
    PerStage<bool> mask_enabled{true, true, true, true};
    MaskMode mask_mode = MaskMode::soft;
    std::size_t mlp_ratio = 4;
    std::size_t decoder_width = 64;
    double lambda = 0.1;

    /// Patch size of stage i (4 for the first stage, 2 afterwards).
    static constexpr std::size_t patch(std::size_t stage) { return stage == 0 ? 4 : 2; }

    /// Grid extent of stage i for an input extent: extent / 2^(i+2).
    static constexpr std::size_t grid(std::size_t extent, std::size_t stage) { return extent >> (stage + 2); }

    AttentionConfig attention(std::size_t stage) const {
        return {channels[stage], heads[stage], sr_ratios[stage], cross_enabled[stage], mask_enabled[stage],
                mask_mode};
    }

    void validate() const {
        if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
            throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) +
                              " must be a positive multiple of 32");
        }
        for (std::size_t i = 0; i < num_stages; ++i) {
            if (depths[i] == 0) throw ConfigError("stage depth must be >= 1");
            attention(i).validate();
            if (grid(height, i) % sr_ratios[i] != 0 || grid(width, i) % sr_ratios[i] != 0) {
                throw ConfigError("stage " + std::to_string(i + 1) + " grid is not divisible by its sr_ratio");
            }
        }
        if (mlp_ratio == 0 || decoder_width == 0) throw ConfigError("mlp_ratio and decoder_width must be positive");
        if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
    }

    void set_cross(bool on) { cross_enabled.fill(on); }
    void set_mask(bool on) { mask_enabled.fill(on); }
};

/// Named presets: small / medium / large follow the MiT-b1/b2/b3 widths,
/// tiny is a desk-scale configuration for tests and toy training.
inline ModelConfig model_preset(const std::string& name) {
    ModelConfig cfg;
    cfg.name = name;
    if (name == "tiny") return cfg;
    cfg.channels = {64, 128, 320, 512};
    cfg.heads = {1, 2, 5, 8};
    cfg.sr_ratios = {8, 4, 2, 1};
    cfg.decoder_width = 256;
    cfg.height = 512;
    cfg.width = 512;
    if (name == "small") {
        cfg.depths = {2, 2, 2, 2};
    } else if (name == "medium") {
        cfg.depths = {3, 3, 6, 3};
    } else if (name == "large") {
        cfg.depths = {3, 3, 18, 3};
    } else {
        throw ConfigError("unknown model name: " + name);
    }
    return cfg;
}

/// Paired appearance / motion tokens of one stage.
template <typename T>
struct TokenMap {
    BasicTensor<T> image;   // [H_i W_i x C_i]
    BasicTensor<T> motion;  // [H_i W_i x C_i]
    std::size_t height = 0;
    std::size_t width = 0;
};

template <typename T>
struct Pyramid {
    PerStage<TokenMap<T>> stages;
    PerStage<BasicTensor<T>> coarse_masks;  // S_i logits, [H_i x W_i]
};

/// Strided conv patch projection followed by layer norm.
template <typename T>
class PatchEmbed {
public:
    PatchEmbed() = default;
    PatchEmbed(BasicParamRegistry<T>& registry, const std::string& prefix, std::size_t in, std::size_t out,
               std::size_t patch, Rng& rng)
        : proj(registry, prefix + ".proj", in, out, patch, patch, 0, rng),
          norm(registry, prefix + ".norm", out),
          patch_(patch) {}

    /// x: [C_in x H x W] -> tokens [(H/p)(W/p) x C_out]
    BasicTensor<T> operator()(const BasicTensor<T>& x) const {
        if (x.rank() != 3 || x.dim(1) % patch_ != 0 || x.dim(2) % patch_ != 0) {
            throw ShapeError("patch_embed: extents " + shape_str(x.shape()) + " not divisible by patch " +
                             std::to_string(patch_));
        }
        return norm(map_to_tokens(proj(x)));
    }

    Conv2d<T> proj;
    LayerNorm<T> norm;

private:
    std::size_t patch_ = 1;
};

/// Pre-norm block: masked asymmetric attention then FFN, residual on both.
template <typename T>
class SimulFlowBlock {
public:
    SimulFlowBlock() = default;
    SimulFlowBlock(BasicParamRegistry<T>& registry, const std::string& prefix, const AttentionConfig& cfg,
                   std::size_t mlp_ratio, Rng& rng)
        : norm1(registry, prefix + ".norm1", cfg.channels),
          attn(registry, prefix + ".attn", cfg, rng),
          norm2(registry, prefix + ".norm2", cfg.channels),
          ffn(registry, prefix + ".ffn", cfg.channels, mlp_ratio, rng) {}

    void operator()(BasicTensor<T>& image, BasicTensor<T>& motion, const BasicTensor<T>& coarse, std::size_t h,
                    std::size_t w, AttentionTrace* trace = nullptr) const {
        auto [image_attn, motion_attn] = attn(norm1(image), norm1(motion), coarse, h, w, trace);
        image = add(image, image_attn);
        motion = add(motion, motion_attn);
        image = add(image, ffn(norm2(image)));
        motion = add(motion, ffn(norm2(motion)));
    }

    LayerNorm<T> norm1;
    SimulFlowAttention<T> attn;
    LayerNorm<T> norm2;
    FeedForward<T> ffn;
};

template <typename T>
class EncoderStage {
public:
    EncoderStage() = default;
    EncoderStage(BasicParamRegistry<T>& registry, const std::string& prefix, const ModelConfig& cfg,
                 std::size_t index, Rng& rng) {
        const std::size_t in = index == 0 ? 3 : cfg.channels[index - 1];
        const std::size_t c = cfg.channels[index];
        patch_embed = PatchEmbed<T>(registry, prefix + ".patch_embed", in, c, ModelConfig::patch(index), rng);
        mask_head = CoarseMaskHead<T>(registry, prefix + ".mask_head", c, rng);
        for (std::size_t b = 0; b < cfg.depths[index]; ++b) {
            blocks.emplace_back(registry, prefix + ".block" + std::to_string(b), cfg.attention(index), cfg.mlp_ratio,
                                rng);
        }
        norm = LayerNorm<T>(registry, prefix + ".norm", c);
    }

    PatchEmbed<T> patch_embed;
    CoarseMaskHead<T> mask_head;
    std::vector<SimulFlowBlock<T>> blocks;
    LayerNorm<T> norm;
};

/// Per-stage attention statistics gathered during a forward pass.
using EncoderTrace = PerStage<AttentionTrace>;

template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(BasicParamRegistry<T>& registry, const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        for (std::size_t i = 0; i < num_stages; ++i) {
            stages_[i] = EncoderStage<T>(registry, "encoder.stage" + std::to_string(i + 1), cfg, i, rng);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    const EncoderStage<T>& stage(std::size_t i) const { return stages_.at(i); }

    /// image, flow_rgb: [3 x H x W] in [0, 1].
    Pyramid<T> operator()(const BasicTensor<T>& image, const BasicTensor<T>& flow_rgb,
                          EncoderTrace* trace = nullptr) const {
        if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("encoder: image must be [3 x H x W]");
        if (image.shape() != flow_rgb.shape()) {
            throw ShapeError("encoder: image " + shape_str(image.shape()) + " vs flow " + shape_str(flow_rgb.shape()));
        }
        if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0) {
            throw ShapeError("encoder: input extents must be multiples of 32, got " + shape_str(image.shape()));
        }
        // (x - 0.5) / 0.5
        BasicTensor<T> image_map = add_scalar(scale(image, T(2)), T(-1));
        BasicTensor<T> motion_map = add_scalar(scale(flow_rgb, T(2)), T(-1));
        std::size_t h = image.dim(1), w = image.dim(2);
        Pyramid<T> out;
        for (std::size_t i = 0; i < num_stages; ++i) {
            const auto& st = stages_[i];
            h /= ModelConfig::patch(i);
            w /= ModelConfig::patch(i);
            BasicTensor<T> img = st.patch_embed(image_map);
            BasicTensor<T> mot = st.patch_embed(motion_map);
            BasicTensor<T> coarse = st.mask_head(img, h, w);
            for (const auto& block : st.blocks) block(img, mot, coarse, h, w, trace ? &(*trace)[i] : nullptr);
            img = st.norm(img);
            mot = st.norm(mot);
            out.stages[i] = {img, mot, h, w};
            out.coarse_masks[i] = coarse;
            if (i + 1 < num_stages) {
                image_map = tokens_to_map(img, h, w);
                motion_map = tokens_to_map(mot, h, w);
            }
        }
        return out;
    }

private:
    ModelConfig cfg_;
    PerStage<EncoderStage<T>> stages_;
};

} // namespace simulflow
