#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "attnalign/checkpoint.hpp"
#include "attnalign/data.hpp"
#include "attnalign/errors.hpp"
#include "attnalign/morphology.hpp"
#include "attnalign/tensor.hpp"

namespace attnalign {

enum class TeacherSource { oracle, external };

/// Strictly positive spatial distribution with unit sum.
struct TeacherMap {
    Tensor grid;
    TeacherSource source = TeacherSource::oracle;
    std::string prompt_meta; // provenance only, never executed
};

struct MorphParams {
    std::size_t dilation_radius = 1;
    bool edge_band = true; // used by the colored branch of build_teacher
    double threshold = 0.3;
    double eps = 1e-6;
};

inline BinaryMask oracle_mask(const Tensor& clean_digit, double threshold) {
    if (clean_digit.rank() != 2 || clean_digit.dim(0) != 28 || clean_digit.dim(1) != 28) {
        throw DimensionError("oracle_mask: expected 28x28 digit, got " +
                             Tensor::shape_string(clean_digit.shape()));
    }
    BinaryMask m(28, 28);
    for (std::size_t i = 0; i < m.size(); ++i) m.grid[i] = clean_digit[i] > threshold ? 1 : 0;
    return m;
}

inline TeacherMap normalize_map(const Tensor& nonneg, double eps) {
    double z = 0.0;
    for (std::size_t i = 0; i < nonneg.size(); ++i) {
        if (nonneg[i] < 0.0) {
            throw DomainError("normalize_map: negative entry at index " + std::to_string(i));
        }
        z += nonneg[i] + eps;
    }
    if (!(z > 0.0)) throw DomainError("normalize_map: normalizer is not positive");
    TeacherMap t;
    t.grid = Tensor(nonneg.shape());
    for (std::size_t i = 0; i < nonneg.size(); ++i) t.grid[i] = (nonneg[i] + eps) / z;
    return t;
}

inline TeacherMap normalize_map(const BinaryMask& m, double eps) {
    Tensor g({m.height, m.width});
    for (std::size_t i = 0; i < m.size(); ++i) g[i] = static_cast<double>(m.grid[i]);
    return normalize_map(g, eps);
}

/// The oracle teacher at 28x28: colored wants the boundary band of the
/// dilated digit, decoy wants the raw thresholded mask.
inline TeacherMap build_teacher(const BiasedExample& example, DatasetKind dataset,
                                const MorphParams& p) {
    BinaryMask m = oracle_mask(example.clean_digit, p.threshold);
    if (dataset == DatasetKind::colored && p.edge_band) {
        m = edge_band(dilate(m, p.dilation_radius), p.dilation_radius);
    }
    TeacherMap t = normalize_map(m, p.eps);
    t.source = TeacherSource::oracle;
    return t;
}

/// 28x28 -> 7x7 by 4x4 average pooling plus renormalization (pooling scales
/// every cell by the same constant, so the distribution is preserved).
inline TeacherMap downsample_teacher(const TeacherMap& t) {
    if (t.grid.rank() != 2 || t.grid.dim(0) != 28 || t.grid.dim(1) != 28) {
        throw DimensionError("downsample_teacher: expected 28x28 map, got " +
                             Tensor::shape_string(t.grid.shape()));
    }
    Tensor pooled = avg_pool2d(t.grid, 4);
    double z = 0.0;
    for (std::size_t i = 0; i < pooled.size(); ++i) z += pooled[i];
    TeacherMap out;
    out.source = t.source;
    out.prompt_meta = t.prompt_meta;
    out.grid = Tensor(pooled.shape());
    for (std::size_t i = 0; i < pooled.size(); ++i) out.grid[i] = pooled[i] / z;
    return out;
}

// ---- map-bundle file ("ATTN") ----
// Little-endian: magic "ATTN", u32 version=1, u32 count, u32 height,
// u32 width, count*height*width f32 values in example order, u32 CRC32 of
// the f32 payload bytes. Values are stored as 32-bit floats, so a save of
// f64 grids quantizes once; save->load->save is byte-idempotent.

inline std::string encode_external_maps(const std::vector<TeacherMap>& maps) {
    if (maps.empty()) throw ConfigError("encode_external_maps: no maps to save");
    const std::size_t h = maps[0].grid.dim(0), w = maps[0].grid.dim(1);
    std::string out = "ATTN";
    ckpt_detail::put_u32(out, 1u);
    ckpt_detail::put_u32(out, static_cast<std::uint32_t>(maps.size()));
    ckpt_detail::put_u32(out, static_cast<std::uint32_t>(h));
    ckpt_detail::put_u32(out, static_cast<std::uint32_t>(w));

    std::string payload;
    payload.reserve(maps.size() * h * w * 4);
    for (const TeacherMap& m : maps) {
        if (m.grid.rank() != 2 || m.grid.dim(0) != h || m.grid.dim(1) != w) {
            throw DimensionError("encode_external_maps: inconsistent map shapes");
        }
        for (std::size_t i = 0; i < m.grid.size(); ++i) {
            const float f = static_cast<float>(m.grid[i]);
            std::uint32_t bits;
            std::memcpy(&bits, &f, sizeof bits);
            ckpt_detail::put_u32(payload, bits);
        }
    }
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size())));
    out += payload;
    ckpt_detail::put_u32(out, crc);
    return out;
}

struct ExternalMapLoad {
    std::vector<TeacherMap> maps;
    std::size_t renormalized = 0; // count of maps whose sum strayed past 1e-3
};

inline ExternalMapLoad decode_external_maps(const std::string& bytes, const std::string& origin) {
    ckpt_detail::Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
                          origin};
    r.need(4, "magic");
    if (std::memcmp(r.p, "ATTN", 4) != 0) {
        throw ParseError(origin + ": wrong magic, not a map bundle");
    }
    r.p += 4;
    r.left -= 4;
    const std::uint32_t version = r.u32("version");
    if (version != 1) {
        throw ParseError(origin + ": unsupported bundle version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32("count");
    const std::uint32_t h = r.u32("height");
    const std::uint32_t w = r.u32("width");
    const std::size_t payload_len = static_cast<std::size_t>(count) * h * w * 4;
    r.need(payload_len + 4, "map payload");
    const auto expect_crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(r.p), static_cast<uInt>(payload_len)));

    ExternalMapLoad out;
    out.maps.reserve(count);
    for (std::uint32_t m = 0; m < count; ++m) {
        Tensor grid({h, w});
        double sum = 0.0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) {
            const std::uint32_t bits = r.u32("map value");
            float f;
            std::memcpy(&f, &bits, sizeof f);
            if (f < 0.0f || !std::isfinite(f)) {
                throw ParseError(origin + ": invalid value in map " + std::to_string(m) +
                                 " (negative or non-finite)");
            }
            grid[i] = static_cast<double>(f);
            sum += grid[i];
        }
        if (!(sum > 0.0)) {
            throw ParseError(origin + ": map " + std::to_string(m) + " sums to zero");
        }
        if (std::fabs(sum - 1.0) > 1e-3) ++out.renormalized;
        TeacherMap t;
        t.grid = Tensor(grid.shape());
        for (std::size_t i = 0; i < grid.size(); ++i) t.grid[i] = grid[i] / sum;
        t.source = TeacherSource::external;
        out.maps.push_back(std::move(t));
    }
    const std::uint32_t stored_crc = r.u32("crc32");
    if (stored_crc != expect_crc) {
        throw ParseError(origin + ": CRC mismatch, payload corrupted");
    }
    return out;
}

inline void save_external_maps(const std::vector<TeacherMap>& maps, const std::string& path) {
    write_file_bytes(path, encode_external_maps(maps));
}

inline ExternalMapLoad load_external_maps(const std::string& path) {
    return decode_external_maps(read_file_string(path), path);
}

/// 7x7 teacher targets for a whole split, train/val/test aligned by index.
struct TeacherSet {
    std::vector<TeacherMap> train, val, test;
};

inline std::vector<TeacherMap> build_teachers_7x7(const std::vector<BiasedExample>& examples,
                                                  DatasetKind dataset, const MorphParams& p) {
    std::vector<TeacherMap> out;
    out.reserve(examples.size());
    for (const BiasedExample& ex : examples) {
        out.push_back(downsample_teacher(build_teacher(ex, dataset, p)));
    }
    return out;
}

inline TeacherSet build_teacher_set(const DatasetSplit& split, const MorphParams& p) {
    TeacherSet set;
    set.train = build_teachers_7x7(split.train, split.kind, p);
    set.val = build_teachers_7x7(split.val, split.kind, p);
    set.test = build_teachers_7x7(split.test, split.kind, p);
    return set;
}

} // namespace attnalign
