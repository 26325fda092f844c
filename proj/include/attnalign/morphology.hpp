#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "attnalign/errors.hpp"

namespace attnalign {

struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> grid; // strictly 0/1, row-major

    BinaryMask() = default;
    BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), grid(h * w, 0) {}

    std::uint8_t& at(std::size_t r, std::size_t c) { return grid[r * width + c]; }
    std::uint8_t at(std::size_t r, std::size_t c) const { return grid[r * width + c]; }
    std::size_t size() const { return grid.size(); }

    bool operator==(const BinaryMask& o) const {
        return height == o.height && width == o.width && grid == o.grid;
    }
};

inline void require_same_size(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.height != b.height || a.width != b.width) {
        throw DimensionError(std::string(op) + ": mask sizes differ, " +
                             std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                             std::to_string(b.height) + "x" + std::to_string(b.width));
    }
}

/// 1 iff any input 1 within Chebyshev distance r; outside the grid counts 0.
inline BinaryMask dilate(const BinaryMask& m, std::size_t r) {
    const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r);
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(m.height);
    const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(m.width);
    BinaryMask out(m.height, m.width);
    for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            std::uint8_t hit = 0;
            for (std::ptrdiff_t dy = -rr; dy <= rr && !hit; ++dy) {
                const std::ptrdiff_t yy = y + dy;
                if (yy < 0 || yy >= h) continue;
                for (std::ptrdiff_t dx = -rr; dx <= rr; ++dx) {
                    const std::ptrdiff_t xx = x + dx;
                    if (xx < 0 || xx >= w) continue;
                    if (m.grid[yy * w + xx]) { hit = 1; break; }
                }
            }
            out.grid[y * w + x] = hit;
        }
    }
    return out;
}

/// 1 iff every cell within Chebyshev distance r is 1; outside counts 0,
/// so anything within r of the border erodes away.
inline BinaryMask erode(const BinaryMask& m, std::size_t r) {
    const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r);
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(m.height);
    const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(m.width);
    BinaryMask out(m.height, m.width);
    for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            std::uint8_t all = 1;
            for (std::ptrdiff_t dy = -rr; dy <= rr && all; ++dy) {
                const std::ptrdiff_t yy = y + dy;
                for (std::ptrdiff_t dx = -rr; dx <= rr; ++dx) {
                    const std::ptrdiff_t xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w || !m.grid[yy * w + xx]) {
                        all = 0;
                        break;
                    }
                }
            }
            out.grid[y * w + x] = all;
        }
    }
    return out;
}

inline BinaryMask mask_not(const BinaryMask& m) {
    BinaryMask out(m.height, m.width);
    for (std::size_t i = 0; i < m.size(); ++i) out.grid[i] = m.grid[i] ? 0 : 1;
    return out;
}

inline BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
    require_same_size(a, b, "mask_and");
    BinaryMask out(a.height, a.width);
    for (std::size_t i = 0; i < a.size(); ++i) out.grid[i] = (a.grid[i] && b.grid[i]) ? 1 : 0;
    return out;
}

/// Morphological gradient dilate(m,r) AND NOT erode(m,r), widened by one
/// extra radius-1 dilation: the thin boundary band around the mask.
inline BinaryMask edge_band(const BinaryMask& m, std::size_t r) {
    if (r < 1) throw DomainError("edge_band: radius must be >= 1");
    BinaryMask band = mask_and(dilate(m, r), mask_not(erode(m, r)));
    return dilate(band, 1);
}

} // namespace attnalign
