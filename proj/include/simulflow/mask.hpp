#pragma once

#include "error.hpp"

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace simulflow {

/// Two-valued H x W mask (0 = background, 1 = foreground).
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(std::size_t height, std::size_t width, std::uint8_t fill = 0)
        : height_(height), width_(width), data_(height * width, fill ? 1 : 0) {}

    BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> values)
        : height_(height), width_(width), data_(std::move(values)) {
        if (data_.size() != height * width) throw ShapeError("BinaryMask: value count does not match extents");
        for (auto& v : data_) {
            if (v > 1) throw ShapeError("BinaryMask: values must be 0 or 1");
        }
    }

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return count() == 0; }

    std::uint8_t operator()(std::size_t y, std::size_t x) const { return data_[y * width_ + x]; }
    void set(std::size_t y, std::size_t x, bool on) { data_[y * width_ + x] = on ? 1 : 0; }

    const std::vector<std::uint8_t>& values() const { return data_; }

    std::size_t count() const { return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1)); }

    bool same_extent(const BinaryMask& other) const { return height_ == other.height_ && width_ == other.width_; }

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<std::uint8_t> data_;
};

inline void require_same_extent(const BinaryMask& a, const BinaryMask& b, const char* what) {
    if (!a.same_extent(b)) {
        throw ShapeError(std::string(what) + ": mask extents differ (" + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()) + ")");
    }
}

/// Nearest-neighbour resize (half-pixel centres).
inline BinaryMask resize_nearest(const BinaryMask& m, std::size_t height, std::size_t width) {
    BinaryMask out(height, width);
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = std::min(m.height() - 1, (2 * y + 1) * m.height() / (2 * height));
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t sx = std::min(m.width() - 1, (2 * x + 1) * m.width() / (2 * width));
            out.set(y, x, m(sy, sx) != 0);
        }
    }
    return out;
}

} // namespace simulflow
