#pragma once

// AdamW, poly learning-rate schedule, batched train step and the training loop.

#include "dataset.hpp"
#include "metrics.hpp"
#include "model.hpp"

#include <functional>
#include <optional>

namespace simulflow {

inline double poly_lr(double base, std::size_t step, std::size_t total, double power = 0.9) {
    if (total == 0 || step >= total) return 0.0;
    return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

/// Decoupled weight decay Adam. Moments are kept per parameter in registry order.
template <typename T>
class BasicAdamW {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    explicit BasicAdamW(const BasicParamRegistry<T>& registry) {
        for (const auto& [name, p] : registry) {
            names_.push_back(name);
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    std::size_t steps() const { return t_; }

    void step(const BasicParamRegistry<T>& registry, double lr) {
        if (registry.size() != names_.size()) throw ConfigError("adamw: registry changed since construction");
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        std::size_t idx = 0;
        for (const auto& [name, param] : registry) {
            auto p = param;
            auto values = p.mutable_data();
            const auto grad = p.grad();
            auto& m = m_[idx];
            auto& v = v_[idx];
            ++idx;
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
                m[i] = beta1 * m[i] + (1 - beta1) * g;
                v[i] = beta2 * v[i] + (1 - beta2) * g * g;
                double x = static_cast<double>(values[i]);
                x -= lr * weight_decay * x;
                x -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
                values[i] = static_cast<T>(x);
            }
        }
    }

    /// Moments and step count as checkpoint metadata entries.
    NamedTensors state_entries() const {
        NamedTensors out;
        out.emplace_back("__adam_step__", Tensor::scalar(static_cast<float>(t_)));
        for (std::size_t i = 0; i < names_.size(); ++i) {
            out.emplace_back("__adam_m__/" + names_[i], to_tensor(m_[i]));
            out.emplace_back("__adam_v__/" + names_[i], to_tensor(v_[i]));
        }
        return out;
    }

    void load_state(const NamedTensors& entries) {
        const Tensor* step = find_entry(entries, "__adam_step__");
        if (step == nullptr) throw FormatError(FormatError::Kind::name_mismatch, "checkpoint has no optimizer state");
        t_ = static_cast<std::size_t>(step->item());
        for (std::size_t i = 0; i < names_.size(); ++i) {
            load_vector(entries, "__adam_m__/" + names_[i], m_[i]);
            load_vector(entries, "__adam_v__/" + names_[i], v_[i]);
        }
    }

    // Moments are held in double; checkpoints store them rounded to f32.
    const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
    const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

private:
    static Tensor to_tensor(const std::vector<double>& x) {
        const std::size_t n = x.size();
        return Tensor({n}, std::vector<float>(x.begin(), x.end()));
    }

    static void load_vector(const NamedTensors& entries, const std::string& name, std::vector<double>& dst) {
        const Tensor* t = find_entry(entries, name);
        if (t == nullptr || t->numel() != dst.size()) {
            throw FormatError(FormatError::Kind::name_mismatch, "optimizer state missing or mis-sized: " + name);
        }
        std::copy(t->data().begin(), t->data().end(), dst.begin());
    }

    std::vector<std::string> names_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

using AdamW = BasicAdamW<float>;

struct StepStats {
    double total = 0;
    double main = 0;
    PerStage<double> aux{};
};

/// Forward every sample, average the losses, one backward pass, one AdamW update.
template <typename T>
StepStats train_step(const BasicModel<T>& model, std::span<const Sample* const> batch, BasicAdamW<T>& opt,
                     double lr) {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    model.params().zero_grad();
    Tape tape;
    StepStats stats;
    {
        Tape::Scope scope(tape);
        std::vector<BasicTensor<T>> losses;
        for (const Sample* s : batch) {
            const auto image = tensor_cast<T>(s->image);
            const auto flow = tensor_cast<T>(s->flow_rgb);
            const auto out = model(image, flow);
            const auto loss = segmentation_loss(out.logits, out.pyramid.coarse_masks, s->gt, model.config().lambda);
            losses.push_back(loss.total);
            stats.main += loss.main;
            for (std::size_t i = 0; i < num_stages; ++i) stats.aux[i] += loss.aux[i];
        }
        const BasicTensor<T> total = scale(sum(concat(losses, 0)), T(1) / static_cast<T>(batch.size()));
        stats.total = static_cast<double>(total.item());
        if (!std::isfinite(stats.total)) throw NumericError("train_step: non-finite loss");
        tape.backward(total);
    }
    const double n = static_cast<double>(batch.size());
    stats.main /= n;
    for (auto& a : stats.aux) a /= n;
    opt.step(model.params(), lr);
    return stats;
}

/// Uniform draw of `batch` frames, determined by (seed, step) alone.
inline std::vector<const Sample*> select_batch(const Dataset& data, std::size_t batch, std::uint64_t seed,
                                               std::size_t step) {
    if (data.sequences.empty()) throw ConfigError("select_batch: empty dataset");
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
    Rng rng(seq);
    std::uniform_int_distribution<std::size_t> pick_seq(0, data.sequences.size() - 1);
    std::vector<const Sample*> out;
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& s = data.sequences[pick_seq(rng)];
        std::uniform_int_distribution<std::size_t> pick_frame(0, s.size() - 1);
        out.push_back(&s[pick_frame(rng)]);
    }
    return out;
}

template <typename T>
BinaryMask predict_mask(const BasicModel<T>& model, const Sample& s) {
    return binarize(model(tensor_cast<T>(s.image), tensor_cast<T>(s.flow_rgb)).logits);
}

struct SplitScore {
    double j = 0;
    double f = 0;
};

/// Mean per-sequence J and F over a split.
template <typename T>
SplitScore evaluate(const BasicModel<T>& model, const Dataset& data) {
    SplitScore score;
    for (const auto& seq : data.sequences) {
        SequenceEvaluator ev("seq");
        for (const auto& s : seq) ev.add(predict_mask(model, s), s.gt);
        const auto r = ev.report();
        score.j += r.j;
        score.f += r.f;
    }
    if (!data.sequences.empty()) {
        score.j /= static_cast<double>(data.sequences.size());
        score.f /= static_cast<double>(data.sequences.size());
    }
    return score;
}

struct TrainOptions {
    double lr = 3e-4;
    std::size_t steps = 2000;
    std::size_t batch_size = 4;
    double power = 0.9;
    std::uint64_t seed = 0;
    std::size_t eval_every = 250;
    double weight_decay = 0.01;
};

struct TrainProgress {
    std::size_t step = 0;  // steps completed
    double best_j = -1;
    std::size_t best_step = 0;
};

struct TrainHooks {
    std::function<void(std::size_t step, double lr, const StepStats&)> on_step;
    std::function<void(std::size_t step, const SplitScore&)> on_eval;
    std::function<void(const TrainProgress&)> on_best;        // new best validation J
    std::function<void(const TrainProgress&)> on_checkpoint;  // resumable state boundary
};

/// Runs from progress.step to opts.steps. Validation happens every
/// eval_every steps and after the final step when a validation set is given.
template <typename T>
TrainProgress train(const BasicModel<T>& model, BasicAdamW<T>& opt, const Dataset& train_set,
                    const Dataset* val_set, const TrainOptions& opts, TrainProgress progress = {},
                    const TrainHooks& hooks = {}) {
    opt.weight_decay = opts.weight_decay;
    while (progress.step < opts.steps) {
        const double lr = poly_lr(opts.lr, progress.step, opts.steps, opts.power);
        const auto batch = select_batch(train_set, opts.batch_size, opts.seed, progress.step);
        const StepStats stats = train_step(model, batch, opt, lr);
        ++progress.step;
        if (hooks.on_step) hooks.on_step(progress.step, lr, stats);
        const bool boundary = progress.step == opts.steps || (opts.eval_every && progress.step % opts.eval_every == 0);
        if (!boundary) continue;
        if (val_set != nullptr && !val_set->sequences.empty()) {
            const SplitScore score = evaluate(model, *val_set);
            if (hooks.on_eval) hooks.on_eval(progress.step, score);
            if (score.j > progress.best_j) {
                progress.best_j = score.j;
                progress.best_step = progress.step;
                if (hooks.on_best) hooks.on_best(progress);
            }
        }
        if (hooks.on_checkpoint) hooks.on_checkpoint(progress);
    }
    return progress;
}

inline constexpr const char* train_state_entry_name = "__train_state__";

inline Tensor encode_progress(const TrainProgress& p) {
    return Tensor({3}, {static_cast<float>(p.step), static_cast<float>(p.best_j), static_cast<float>(p.best_step)});
}

inline TrainProgress decode_progress(const Tensor& t) {
    if (t.numel() != 3) throw FormatError(FormatError::Kind::bad_header, "train state entry is malformed");
    return {static_cast<std::size_t>(t.data()[0]), static_cast<double>(t.data()[1]),
            static_cast<std::size_t>(t.data()[2])};
}

} // namespace simulflow
