#pragma once

// All-MLP decoder, binary mask emission, the training loss, and the model
// that ties encoder, decoder and parameter registry together.

#include "encoder.hpp"
#include "mask.hpp"

namespace simulflow {

/// F_i = Linear(C_i, C)(I_i + O_i), upsampled to H/4 x W/4, concatenated,
/// fused by Linear(4C, C), classified by Linear(C, 2), upsampled to H x W.
template <typename T>
class Decoder {
public:
    Decoder() = default;
    Decoder(BasicParamRegistry<T>& registry, const ModelConfig& cfg, Rng& rng) : width_(cfg.decoder_width) {
        for (std::size_t i = 0; i < num_stages; ++i) {
            stage_proj[i] = Linear<T>(registry, "decoder.linear_c" + std::to_string(i + 1), cfg.channels[i],
                                      cfg.decoder_width, rng);
        }
        fuse = Linear<T>(registry, "decoder.linear_fuse", num_stages * cfg.decoder_width, cfg.decoder_width, rng);
        classifier = Linear<T>(registry, "decoder.linear_pred", cfg.decoder_width, 2, rng);
    }

    /// Returns logits [2 x H x W]; channel 0 background, channel 1 foreground.
    BasicTensor<T> operator()(const Pyramid<T>& pyramid) const {
        for (std::size_t i = 0; i < num_stages; ++i) {
            if (!pyramid.stages[i].image.defined() || !pyramid.stages[i].motion.defined()) {
                throw ShapeError("decode: pyramid stage " + std::to_string(i + 1) + " is missing");
            }
        }
        const std::size_t qh = pyramid.stages[0].height, qw = pyramid.stages[0].width;
        std::vector<BasicTensor<T>> features;
        for (std::size_t i = 0; i < num_stages; ++i) {
            const auto& st = pyramid.stages[i];
            BasicTensor<T> f = stage_proj[i](add(st.image, st.motion));
            f = tokens_to_map(f, st.height, st.width);
            if (st.height != qh || st.width != qw) f = bilinear_resize(f, qh, qw);
            features.push_back(f);
        }
        BasicTensor<T> fused = fuse(map_to_tokens(concat(features, 0)));
        BasicTensor<T> logits = tokens_to_map(classifier(fused), qh, qw);
        return bilinear_resize(logits, qh * 4, qw * 4);
    }

    PerStage<Linear<T>> stage_proj;
    Linear<T> fuse;
    Linear<T> classifier;

private:
    std::size_t width_ = 0;
};

enum class TieBreak { background, foreground };

/// Per-pixel argmax over the two logit channels. Exact ties resolve to
/// background unless told otherwise.
template <typename T>
BinaryMask binarize(const BasicTensor<T>& logits, TieBreak tie = TieBreak::background) {
    if (logits.rank() != 3 || logits.dim(0) != 2) throw ShapeError("binarize: expects logits [2 x H x W]");
    const std::size_t h = logits.dim(1), w = logits.dim(2), n = h * w;
    const auto z = logits.data();
    BinaryMask mask(h, w);
    for (std::size_t p = 0; p < n; ++p) {
        const T bg = z[p], fg = z[n + p];
        const bool on = fg > bg || (fg == bg && tie == TieBreak::foreground);
        mask.set(p / w, p % w, on);
    }
    return mask;
}

/// Softmax foreground probability per pixel, [H x W] row-major.
template <typename T>
std::vector<float> foreground_probability(const BasicTensor<T>& logits) {
    const std::size_t n = logits.dim(1) * logits.dim(2);
    std::vector<float> prob(n);
    const auto z = logits.data();
    for (std::size_t p = 0; p < n; ++p) prob[p] = static_cast<float>(sigmoid_scalar(double(z[n + p]) - z[p]));
    return prob;
}

/// Area-average downsampling of a binary mask to soft targets in [0, 1].
template <typename T>
std::vector<T> area_downsample(const BinaryMask& gt, std::size_t h, std::size_t w) {
    if (h == 0 || w == 0 || gt.height() % h != 0 || gt.width() % w != 0) {
        throw ShapeError("area_downsample: " + std::to_string(gt.height()) + "x" + std::to_string(gt.width()) +
                         " is not an integer multiple of " + std::to_string(h) + "x" + std::to_string(w));
    }
    const std::size_t fy = gt.height() / h, fx = gt.width() / w;
    std::vector<T> out(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            std::size_t on = 0;
            for (std::size_t dy = 0; dy < fy; ++dy) {
                for (std::size_t dx = 0; dx < fx; ++dx) on += gt(y * fy + dy, x * fx + dx);
            }
            out[y * w + x] = static_cast<T>(static_cast<double>(on) / static_cast<double>(fy * fx));
        }
    }
    return out;
}

template <typename T>
struct LossBundle {
    BasicTensor<T> total;  // differentiable scalar
    double main = 0;
    PerStage<double> aux{};
    double lambda = 0;

    double total_value() const { return static_cast<double>(total.item()); }
};

/// L = CE(M', M_G) + lambda * sum_i BCE(Sigmoid(S_i), area-downsampled M_G).
template <typename T>
LossBundle<T> segmentation_loss(const BasicTensor<T>& logits, const PerStage<BasicTensor<T>>& coarse,
                                const BinaryMask& gt, double lambda) {
    if (logits.rank() != 3 || logits.dim(0) != 2 || logits.dim(1) != gt.height() || logits.dim(2) != gt.width()) {
        throw ShapeError("loss: logits " + shape_str(logits.shape()) + " vs ground truth " +
                         std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
    }
    LossBundle<T> out;
    out.lambda = lambda;
    BasicTensor<T> main = cross_entropy(logits, gt.values());
    out.main = static_cast<double>(main.item());
    std::vector<BasicTensor<T>> aux_terms;
    for (std::size_t i = 0; i < num_stages; ++i) {
        const auto& s = coarse[i];
        if (!s.defined() || s.rank() != 2) throw ShapeError("loss: coarse mask " + std::to_string(i + 1) + " missing");
        BasicTensor<T> term = bce_with_logits(s, area_downsample<T>(gt, s.dim(0), s.dim(1)));
        out.aux[i] = static_cast<double>(term.item());
        aux_terms.push_back(term);
    }
    BasicTensor<T> aux_sum = sum(concat(aux_terms, 0));
    out.total = add(main, scale(aux_sum, static_cast<T>(lambda)));
    if (!std::isfinite(out.total_value())) throw NumericError("loss: non-finite total");
    return out;
}

template <typename T>
struct ModelOutput {
    Pyramid<T> pyramid;
    BasicTensor<T> logits;
};

/// Encoder + decoder over a shared parameter registry.
template <typename T>
class BasicModel {
public:
    BasicModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        encoder_ = Encoder<T>(registry_, cfg_, rng);
        decoder_ = Decoder<T>(registry_, cfg_, rng);
    }

    BasicModel(const BasicModel&) = delete;
    BasicModel& operator=(const BasicModel&) = delete;
    BasicModel(BasicModel&&) noexcept = default;
    BasicModel& operator=(BasicModel&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }
    const BasicParamRegistry<T>& params() const { return registry_; }
    const Encoder<T>& encoder() const { return encoder_; }
    const Decoder<T>& decoder() const { return decoder_; }

    ModelOutput<T> operator()(const BasicTensor<T>& image, const BasicTensor<T>& flow_rgb,
                              EncoderTrace* trace = nullptr) const {
        ModelOutput<T> out;
        out.pyramid = encoder_(image, flow_rgb, trace);
        out.logits = decoder_(out.pyramid);
        return out;
    }

    /// Overwrite every parameter from a registry with identical names and shapes.
    template <typename U>
    void copy_parameters_from(const BasicParamRegistry<U>& source) {
        if (source.size() != registry_.size()) throw ConfigError("copy_parameters_from: parameter count mismatch");
        for (const auto& [name, dst] : registry_) {
            const auto& src = source.get(name);
            if (src.shape() != dst.shape()) throw ShapeError("copy_parameters_from: shape mismatch for " + name);
            auto target = dst;
            auto values = target.mutable_data();
            for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(src.data()[i]);
        }
    }

private:
    ModelConfig cfg_;
    BasicParamRegistry<T> registry_;
    Encoder<T> encoder_;
    Decoder<T> decoder_;
};

using Model = BasicModel<float>;

} // namespace simulflow
