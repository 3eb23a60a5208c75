#pragma once

// Dataset tree on disk:
//   <root>/manifest.json
//   <root>/{train,val}/seq_NNN/frame_NNN.ppm   RGB frame
//   <root>/{train,val}/seq_NNN/frame_NNN.tsr   flow (u, v) as [2 x H x W]
//   <root>/{train,val}/seq_NNN/frame_NNN.pgm   ground-truth mask

#include "data.hpp"
#include "io.hpp"

#include <json.hpp>

#include <cstdio>

namespace simulflow {

inline std::string indexed_name(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%03zu", prefix, i);
    return buf;
}

inline std::string sequence_name(std::size_t i) { return indexed_name("seq", i); }
inline std::string frame_name(std::size_t i) { return indexed_name("frame", i); }

/// Sequences of one split held in memory.
struct Dataset {
    std::vector<std::string> names;
    std::vector<std::vector<Sample>> sequences;

    std::size_t frames() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.size();
        return n;
    }
};

inline Dataset dataset_from_specs(const std::vector<SceneSpec>& specs) {
    Dataset d;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        d.names.push_back(sequence_name(i));
        d.sequences.push_back(generate_sequence(specs[i]));
    }
    return d;
}

struct SynthOptions {
    std::size_t n_train = 200;
    std::size_t n_val = 40;
    std::uint64_t seed = 0;
    SceneOptions scene;
};

inline nlohmann::json scene_manifest(const SceneSpec& spec, const std::string& name) {
    return {{"name", name},
            {"seed", spec.seed},
            {"variant", spec.variant},
            {"distractors", spec.distractors.size()},
            {"frames", spec.length},
            {"flow_noise_std", spec.flow_noise_std},
            {"drift", {spec.drift_x, spec.drift_y}},
            {"primary_velocity", {spec.primary.vx, spec.primary.vy}}};
}

inline void write_split(const fs::path& dir, const std::vector<SceneSpec>& specs) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const fs::path seq_dir = dir / sequence_name(i);
        const auto frames = generate_sequence(specs[i]);
        for (std::size_t t = 0; t < frames.size(); ++t) {
            const std::string base = frame_name(t);
            write_ppm(seq_dir / (base + ".ppm"), frames[t].image);
            write_tsr(seq_dir / (base + ".tsr"), frames[t].flow);
            write_pgm_mask(seq_dir / (base + ".pgm"), frames[t].gt);
        }
    }
}

/// Generates both splits and writes the tree plus manifest.json.
inline nlohmann::json write_dataset(const fs::path& root, const SynthOptions& opt) {
    const Splits splits = make_splits(opt.n_train, opt.n_val, opt.seed, opt.scene);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec || !fs::is_directory(root)) throw FormatError(FormatError::Kind::io, "cannot create " + root.string());
    write_split(root / "train", splits.train);
    write_split(root / "val", splits.val);
    nlohmann::json manifest = {{"size", opt.scene.size},
                               {"length", opt.scene.length},
                               {"distractors", opt.scene.distractors},
                               {"flow_noise_std", opt.scene.flow_noise_std},
                               {"seed", opt.seed},
                               {"train", nlohmann::json::array()},
                               {"val", nlohmann::json::array()}};
    for (std::size_t i = 0; i < splits.train.size(); ++i) {
        manifest["train"].push_back(scene_manifest(splits.train[i], sequence_name(i)));
    }
    for (std::size_t i = 0; i < splits.val.size(); ++i) {
        manifest["val"].push_back(scene_manifest(splits.val[i], sequence_name(i)));
    }
    const std::string text = manifest.dump(2) + "\n";
    write_file_atomic(root / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return manifest;
}

inline std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories, const std::string& ext = {}) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (directories ? e.is_directory() : (e.is_regular_file() && e.path().extension() == ext)) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline Sample load_frame(const fs::path& base) {
    Sample s;
    s.image = read_ppm(fs::path(base).replace_extension(".ppm"));
    s.flow = read_tsr(fs::path(base).replace_extension(".tsr"));
    s.gt = read_pgm_mask(fs::path(base).replace_extension(".pgm"));
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    if (s.flow.shape() != Shape{2, h, w} || s.gt.height() != h || s.gt.width() != w) {
        throw FormatError(FormatError::Kind::bad_header, base.string() + ": frame, flow and mask extents disagree");
    }
    s.flow_rgb = flow_to_rgb(s.flow);
    return s;
}

/// Loads <root>/<split>; every frame_*.ppm needs its .tsr and .pgm siblings.
inline Dataset load_split(const fs::path& root, const std::string& split) {
    const fs::path dir = root / split;
    if (!fs::is_directory(dir)) throw FormatError(FormatError::Kind::io, "missing split directory " + dir.string());
    Dataset d;
    for (const auto& seq_dir : sorted_entries(dir, true)) {
        std::vector<Sample> frames;
        for (const auto& ppm : sorted_entries(seq_dir, false, ".ppm")) {
            frames.push_back(load_frame(fs::path(ppm).replace_extension()));
        }
        if (frames.empty()) continue;
        d.names.push_back(seq_dir.filename().string());
        d.sequences.push_back(std::move(frames));
    }
    if (d.sequences.empty()) throw FormatError(FormatError::Kind::io, "no sequences under " + dir.string());
    return d;
}

} // namespace simulflow
