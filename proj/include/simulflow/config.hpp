#pragma once

// JSON run configuration for training.
//
// {
//   "model":    "tiny",   preset: tiny | small | medium | large
//   "height", "width", "depths", "channels", "heads", "sr_ratios",
//   "cross_enabled", "mask_enabled", "mask_mode", "mlp_ratio",
//   "decoder_width", "lambda"           optional preset overrides
//   "lr":           3e-4
//   "steps":        2000
//   "batch_size":   4
//   "power":        0.9   poly schedule exponent
//   "weight_decay": 0.01
//   "eval_every":   250   validation interval in steps
//   "seed":         required
//   "data":         optional dataset root (the --data flag wins)
// }
//
// The toy defaults (lr 3e-4, batch 4, 64x64) suit randomly initialised
// tiny models; 6e-5 at 512x512 is the setting for pretrained backbones.

#include "train.hpp"

#include <json.hpp>

#include <optional>

namespace simulflow {

struct RunConfig {
    ModelConfig model = model_preset("tiny");
    TrainOptions train;
    std::optional<std::string> data;
};

namespace detail {

template <typename V>
V json_get(const nlohmann::json& j, const char* key) {
    try {
        return j.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

template <typename V>
void json_stage_array(const nlohmann::json& j, const char* key, PerStage<V>& dst) {
    if (!j.contains(key)) return;
    const auto v = json_get<std::vector<V>>(j, key);
    if (v.size() != num_stages) throw ConfigError(std::string("config: '") + key + "' needs 4 entries");
    std::copy(v.begin(), v.end(), dst.begin());
}

} // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, bool require_seed = true) {
    static const std::set<std::string> known = {
        "model",      "height",     "width",         "depths", "channels", "heads",        "sr_ratios",
        "cross_enabled", "mask_enabled", "mask_mode", "mlp_ratio", "decoder_width", "lambda", "lr",
        "steps",      "batch_size", "power",         "weight_decay", "eval_every", "seed", "data"};
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    }
    RunConfig rc;
    if (j.contains("model")) rc.model = model_preset(detail::json_get<std::string>(j, "model"));
    auto& m = rc.model;
    if (j.contains("height")) m.height = detail::json_get<std::size_t>(j, "height");
    if (j.contains("width")) m.width = detail::json_get<std::size_t>(j, "width");
    detail::json_stage_array(j, "depths", m.depths);
    detail::json_stage_array(j, "channels", m.channels);
    detail::json_stage_array(j, "heads", m.heads);
    detail::json_stage_array(j, "sr_ratios", m.sr_ratios);
    detail::json_stage_array(j, "cross_enabled", m.cross_enabled);
    detail::json_stage_array(j, "mask_enabled", m.mask_enabled);
    if (j.contains("mask_mode")) m.mask_mode = parse_mask_mode(detail::json_get<std::string>(j, "mask_mode"));
    if (j.contains("mlp_ratio")) m.mlp_ratio = detail::json_get<std::size_t>(j, "mlp_ratio");
    if (j.contains("decoder_width")) m.decoder_width = detail::json_get<std::size_t>(j, "decoder_width");
    if (j.contains("lambda")) m.lambda = detail::json_get<double>(j, "lambda");
    m.validate();

    auto& t = rc.train;
    if (j.contains("lr")) t.lr = detail::json_get<double>(j, "lr");
    if (j.contains("steps")) t.steps = detail::json_get<std::size_t>(j, "steps");
    if (j.contains("batch_size")) t.batch_size = detail::json_get<std::size_t>(j, "batch_size");
    if (j.contains("power")) t.power = detail::json_get<double>(j, "power");
    if (j.contains("weight_decay")) t.weight_decay = detail::json_get<double>(j, "weight_decay");
    if (j.contains("eval_every")) t.eval_every = detail::json_get<std::size_t>(j, "eval_every");
    if (j.contains("seed")) {
        t.seed = detail::json_get<std::uint64_t>(j, "seed");
    } else if (require_seed) {
        throw ConfigError("config: 'seed' is required for training");
    }
    if (j.contains("data")) rc.data = detail::json_get<std::string>(j, "data");
    if (!(t.lr >= 0) || t.batch_size == 0 || !(t.power >= 0) || !(t.weight_decay >= 0)) {
        throw ConfigError("config: lr, power and weight_decay must be >= 0 and batch_size >= 1");
    }
    return rc;
}

inline RunConfig load_run_config(const fs::path& path, bool require_seed = true) {
    const Bytes bytes = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j, require_seed);
}

} // namespace simulflow
