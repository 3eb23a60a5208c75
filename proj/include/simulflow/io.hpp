#pragma once

// On-disk formats:
//   TSR   "TSR1" | u8 dtype (0 = f32 LE) | u8 ndim | ndim x u32 LE extents | payload
//   SFCK  "SFCK" | u32 count | count x (u16 name length, UTF-8 name, TSR) | u32 CRC32
//   PGM (P5) masks and grey maps, PPM (P6) RGB images, maxval 255.
// All writers go through a temporary file and rename.

#include "encoder.hpp"
#include "mask.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <cctype>
#include <map>
#include <set>

namespace simulflow {

static_assert(std::endian::native == std::endian::little, "formats assume a little-endian host");

namespace fs = std::filesystem;

using Bytes = std::vector<std::uint8_t>;

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

inline Bytes read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError(FormatError::Kind::io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError(FormatError::Kind::io, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

namespace detail {

template <typename U>
void put(Bytes& out, U value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(U));
}

template <typename U>
U take(std::span<const std::uint8_t> bytes, std::size_t& offset, const char* what) {
    if (offset + sizeof(U) > bytes.size()) throw FormatError(FormatError::Kind::truncated, std::string(what) + ": truncated");
    U value;
    std::memcpy(&value, bytes.data() + offset, sizeof(U));
    offset += sizeof(U);
    return value;
}

} // namespace detail

// ---------------------------------------------------------------------------
// TSR

inline constexpr char tsr_magic[4] = {'T', 'S', 'R', '1'};
inline constexpr std::uint8_t tsr_dtype_f32 = 0;

inline void encode_tsr(Bytes& out, const Tensor& t) {
    if (t.rank() > 255) throw ShapeError("tsr: rank too large");
    out.insert(out.end(), tsr_magic, tsr_magic + 4);
    out.push_back(tsr_dtype_f32);
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) {
        if (d > 0xffffffffu) throw ShapeError("tsr: extent exceeds u32");
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), p, p + t.numel() * sizeof(float));
}

inline Tensor decode_tsr(std::span<const std::uint8_t> bytes, std::size_t& offset) {
    if (offset + 4 > bytes.size()) throw FormatError(FormatError::Kind::truncated, "tsr: truncated header");
    if (std::memcmp(bytes.data() + offset, tsr_magic, 4) != 0) {
        throw FormatError(FormatError::Kind::bad_magic, "tsr: bad magic");
    }
    offset += 4;
    const auto dtype = detail::take<std::uint8_t>(bytes, offset, "tsr");
    if (dtype != tsr_dtype_f32) {
        throw FormatError(FormatError::Kind::unknown_dtype, "tsr: unknown dtype " + std::to_string(dtype));
    }
    const auto ndim = detail::take<std::uint8_t>(bytes, offset, "tsr");
    if (ndim == 0) throw FormatError(FormatError::Kind::bad_header, "tsr: zero rank");
    Shape shape;
    for (std::uint8_t i = 0; i < ndim; ++i) {
        const auto d = detail::take<std::uint32_t>(bytes, offset, "tsr");
        if (d == 0) throw FormatError(FormatError::Kind::bad_header, "tsr: zero extent");
        shape.push_back(d);
    }
    const std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(float) > bytes.size()) {
        throw FormatError(FormatError::Kind::truncated, "tsr: truncated payload (" + std::to_string(n) + " values expected)");
    }
    std::vector<float> values(n);
    std::memcpy(values.data(), bytes.data() + offset, n * sizeof(float));
    offset += n * sizeof(float);
    return Tensor(std::move(shape), std::move(values));
}

inline void write_tsr(const fs::path& path, const Tensor& t) {
    Bytes out;
    encode_tsr(out, t);
    write_file_atomic(path, out);
}

inline Tensor read_tsr(const fs::path& path) {
    const Bytes bytes = read_file(path);
    std::size_t offset = 0;
    Tensor t = decode_tsr(bytes, offset);
    if (offset != bytes.size()) throw FormatError(FormatError::Kind::bad_header, "tsr: trailing bytes in " + path.string());
    return t;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char checkpoint_magic[4] = {'S', 'F', 'C', 'K'};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Entries whose names start with "__" carry metadata rather than parameters.
inline bool is_meta_entry(const std::string& name) { return name.rfind("__", 0) == 0; }

inline Bytes encode_checkpoint(const NamedTensors& entries) {
    Bytes out(checkpoint_magic, checkpoint_magic + 4);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    std::set<std::string> seen;
    for (const auto& [name, tensor] : entries) {
        if (!seen.insert(name).second) throw FormatError(FormatError::Kind::name_mismatch, "checkpoint: duplicate name " + name);
        if (name.size() > 0xffff) throw FormatError(FormatError::Kind::bad_header, "checkpoint: name too long");
        detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        encode_tsr(out, tensor);
    }
    detail::put<std::uint32_t>(out, crc32_of(out));
    return out;
}

inline NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12) throw FormatError(FormatError::Kind::truncated, "checkpoint: file too short");
    if (std::memcmp(bytes.data(), checkpoint_magic, 4) != 0) {
        throw FormatError(FormatError::Kind::bad_magic, "checkpoint: bad magic");
    }
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, 4);
    if (crc32_of(bytes.first(body)) != stored) throw FormatError(FormatError::Kind::crc_mismatch, "checkpoint: CRC mismatch");
    const auto payload = bytes.first(body);
    std::size_t offset = 4;
    const auto count = detail::take<std::uint32_t>(payload, offset, "checkpoint");
    NamedTensors entries;
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::take<std::uint16_t>(payload, offset, "checkpoint");
        if (offset + len > payload.size()) throw FormatError(FormatError::Kind::truncated, "checkpoint: truncated name");
        std::string name(reinterpret_cast<const char*>(payload.data() + offset), len);
        offset += len;
        if (!seen.insert(name).second) throw FormatError(FormatError::Kind::name_mismatch, "checkpoint: duplicate name " + name);
        entries.emplace_back(std::move(name), decode_tsr(payload, offset));
    }
    if (offset != payload.size()) throw FormatError(FormatError::Kind::bad_header, "checkpoint: trailing bytes");
    return entries;
}

inline void save_checkpoint(const fs::path& path, const ParamRegistry& registry, const NamedTensors& meta = {}) {
    if (registry.empty()) throw ConfigError("save_checkpoint: empty registry");
    NamedTensors entries = meta;
    for (const auto& [name, tensor] : registry) entries.emplace_back(name, tensor.detach());
    write_file_atomic(path, encode_checkpoint(entries));
}

inline NamedTensors read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

/// Restore every registry parameter bitwise from `entries`. Missing or extra
/// parameter names (and shape disagreements) are listed in the error.
inline void restore_parameters(const ParamRegistry& registry, const NamedTensors& entries) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : entries) {
        if (!is_meta_entry(name)) by_name.emplace(name, &t);
    }
    std::vector<std::string> missing, extra, mismatched;
    for (const auto& [name, tensor] : registry) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            missing.push_back(name);
        } else if (it->second->shape() != tensor.shape()) {
            mismatched.push_back(name + " " + shape_str(it->second->shape()) + " vs " + shape_str(tensor.shape()));
        }
    }
    for (const auto& [name, t] : by_name) {
        if (!registry.contains(name)) extra.push_back(name);
    }
    if (!missing.empty() || !extra.empty() || !mismatched.empty()) {
        std::string msg = "checkpoint does not match model parameters;";
        auto list = [&](const char* label, const std::vector<std::string>& names) {
            if (names.empty()) return;
            msg += std::string(" ") + label + ":";
            for (const auto& n : names) msg += " " + n;
            msg += ";";
        };
        list("missing", missing);
        list("extra", extra);
        list("shape", mismatched);
        throw FormatError(FormatError::Kind::name_mismatch, msg);
    }
    for (const auto& [name, tensor] : registry) {
        auto target = tensor;
        const auto src = by_name.at(name)->data();
        std::copy(src.begin(), src.end(), target.mutable_data().begin());
    }
}

/// Returns the metadata entries of the checkpoint after restoring parameters.
inline NamedTensors load_checkpoint(const fs::path& path, const ParamRegistry& registry) {
    NamedTensors entries = read_checkpoint(path);
    restore_parameters(registry, entries);
    NamedTensors meta;
    for (auto& e : entries) {
        if (is_meta_entry(e.first)) meta.push_back(std::move(e));
    }
    return meta;
}

inline const Tensor* find_entry(const NamedTensors& entries, const std::string& name) {
    for (const auto& e : entries) {
        if (e.first == name) return &e.second;
    }
    return nullptr;
}

// Model configuration as a flat f32 vector stored under "__config__".
inline constexpr const char* config_entry_name = "__config__";

inline Tensor encode_model_config(const ModelConfig& cfg) {
    std::vector<float> v;
    v.push_back(1.0f);  // layout version
    const char* names[] = {"tiny", "small", "medium", "large"};
    float code = -1;
    for (int i = 0; i < 4; ++i) {
        if (cfg.name == names[i]) code = static_cast<float>(i);
    }
    v.push_back(code);
    v.push_back(static_cast<float>(cfg.height));
    v.push_back(static_cast<float>(cfg.width));
    for (const auto* arr : {&cfg.depths, &cfg.channels, &cfg.heads, &cfg.sr_ratios}) {
        for (auto x : *arr) v.push_back(static_cast<float>(x));
    }
    for (const auto* arr : {&cfg.cross_enabled, &cfg.mask_enabled}) {
        for (bool x : *arr) v.push_back(x ? 1.0f : 0.0f);
    }
    v.push_back(cfg.mask_mode == MaskMode::hard ? 1.0f : 0.0f);
    v.push_back(static_cast<float>(cfg.mlp_ratio));
    v.push_back(static_cast<float>(cfg.decoder_width));
    v.push_back(static_cast<float>(cfg.lambda));
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

inline ModelConfig decode_model_config(const Tensor& t) {
    const auto v = t.data();
    constexpr std::size_t expected = 4 + 16 + 8 + 4;
    if (t.rank() != 1 || v.size() != expected || v[0] != 1.0f) {
        throw FormatError(FormatError::Kind::bad_header, "checkpoint: unsupported config layout");
    }
    ModelConfig cfg;
    const char* names[] = {"tiny", "small", "medium", "large"};
    const int code = static_cast<int>(v[1]);
    cfg.name = code >= 0 && code < 4 ? names[code] : "custom";
    std::size_t i = 2;
    auto next = [&] { return static_cast<std::size_t>(v[i++]); };
    cfg.height = next();
    cfg.width = next();
    for (auto* arr : {&cfg.depths, &cfg.channels, &cfg.heads, &cfg.sr_ratios}) {
        for (auto& x : *arr) x = next();
    }
    for (auto* arr : {&cfg.cross_enabled, &cfg.mask_enabled}) {
        for (auto& x : *arr) x = v[i++] != 0.0f;
    }
    cfg.mask_mode = v[i++] != 0.0f ? MaskMode::hard : MaskMode::soft;
    cfg.mlp_ratio = next();
    cfg.decoder_width = next();
    cfg.lambda = static_cast<double>(v[i++]);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// PGM / PPM

struct PnmImage {
    std::string magic;
    std::size_t width = 0;
    std::size_t height = 0;
    Bytes pixels;  // channels * width * height, interleaved
};

inline PnmImage decode_pnm(std::span<const std::uint8_t> bytes, const std::string& expected_magic,
                           const std::string& source) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            return;
        }
    };
    auto token = [&] {
        skip_space();
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t += static_cast<char>(bytes[pos++]);
        if (t.empty()) throw FormatError(FormatError::Kind::truncated, source + ": truncated header");
        return t;
    };
    auto number = [&](const char* what) {
        const std::string t = token();
        if (t.find_first_not_of("0123456789") != std::string::npos || t.size() > 9) {
            throw FormatError(FormatError::Kind::bad_header, source + ": bad " + what + " '" + t + "'");
        }
        return static_cast<std::size_t>(std::stoul(t));
    };
    PnmImage img;
    if (bytes.size() < 2) throw FormatError(FormatError::Kind::truncated, source + ": empty file");
    img.magic = std::string(reinterpret_cast<const char*>(bytes.data()), 2);
    pos = 2;
    if (img.magic != expected_magic) {
        throw FormatError(FormatError::Kind::bad_magic,
                          source + ": expected binary " + expected_magic + ", found '" + img.magic + "'");
    }
    img.width = number("width");
    img.height = number("height");
    const std::size_t maxval = number("maxval");
    if (img.width == 0 || img.height == 0) throw FormatError(FormatError::Kind::bad_header, source + ": zero extent");
    if (maxval != 255) throw FormatError(FormatError::Kind::bad_maxval, source + ": maxval must be 255");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
        throw FormatError(FormatError::Kind::truncated, source + ": missing raster");
    }
    ++pos;
    const std::size_t channels = expected_magic == "P6" ? 3 : 1;
    const std::size_t n = channels * img.width * img.height;
    if (bytes.size() - pos < n) throw FormatError(FormatError::Kind::truncated, source + ": truncated raster");
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return img;
}

inline Bytes encode_pnm(const std::string& magic, std::size_t width, std::size_t height, const Bytes& pixels) {
    const std::string header = magic + "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    Bytes out(header.begin(), header.end());
    out.insert(out.end(), pixels.begin(), pixels.end());
    return out;
}

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_pgm_mask(const fs::path& path, const BinaryMask& mask) {
    Bytes px(mask.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask.values()[i] ? 255 : 0;
    write_file_atomic(path, encode_pnm("P5", mask.width(), mask.height(), px));
}

inline BinaryMask decode_pgm_mask(std::span<const std::uint8_t> bytes, const std::string& source = "pgm") {
    const PnmImage img = decode_pnm(bytes, "P5", source);
    std::vector<std::uint8_t> values(img.pixels.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto v = img.pixels[i];
        if (v != 0 && v != 255) {
            throw FormatError(FormatError::Kind::bad_mask_value, source + ": mask value " + std::to_string(v) + " not in {0,255}");
        }
        values[i] = v ? 1 : 0;
    }
    return BinaryMask(img.height, img.width, std::move(values));
}

inline BinaryMask read_pgm_mask(const fs::path& path) { return decode_pgm_mask(read_file(path), path.string()); }

/// Grey map in [0, 1] (e.g. probabilities) as a P5 image.
inline void write_pgm_gray(const fs::path& path, std::size_t height, std::size_t width, std::span<const float> values) {
    if (values.size() != height * width) throw ShapeError("write_pgm_gray: value count mismatch");
    Bytes px(values.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(values[i]);
    write_file_atomic(path, encode_pnm("P5", width, height, px));
}

/// Returns [H x W] values scaled to [0, 1].
inline Tensor read_pgm_gray(const fs::path& path) {
    const PnmImage img = decode_pnm(read_file(path), "P5", path.string());
    std::vector<float> values(img.pixels.size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(img.pixels[i] / 255.0);
    return Tensor({img.height, img.width}, std::move(values));
}

/// image: [3 x H x W] in [0, 1].
inline void write_ppm(const fs::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expects [3 x H x W]");
    const std::size_t h = image.dim(1), w = image.dim(2), n = h * w;
    Bytes px(3 * n);
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t c = 0; c < 3; ++c) px[3 * p + c] = to_byte(image.data()[c * n + p]);
    }
    write_file_atomic(path, encode_pnm("P6", w, h, px));
}

inline Tensor decode_ppm(std::span<const std::uint8_t> bytes, const std::string& source = "ppm") {
    const PnmImage img = decode_pnm(bytes, "P6", source);
    const std::size_t n = img.width * img.height;
    std::vector<float> values(3 * n);
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t c = 0; c < 3; ++c) values[c * n + p] = static_cast<float>(img.pixels[3 * p + c] / 255.0);
    }
    return Tensor({3, img.height, img.width}, std::move(values));
}

inline Tensor read_ppm(const fs::path& path) { return decode_ppm(read_file(path), path.string()); }

} // namespace simulflow
