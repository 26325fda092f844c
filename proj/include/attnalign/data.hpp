#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "attnalign/errors.hpp"
#include "attnalign/image_io.hpp"
#include "attnalign/rng.hpp"
#include "attnalign/tensor.hpp"

namespace attnalign {

enum class DatasetKind { colored, decoy };

inline std::string dataset_name(DatasetKind k) {
    return k == DatasetKind::colored ? "colored" : "decoy";
}

struct MnistRaw {
    Tensor images; // [N,28,28], values byte/255 in [0,1]
    std::vector<int> labels;

    std::size_t count() const { return labels.size(); }
};

namespace idx_detail {

inline std::uint32_t read_be_u32(const std::vector<std::uint8_t>& b, std::size_t off,
                                 const std::string& field) {
    if (b.size() < off + 4) throw ParseError("truncated IDX header at " + field);
    return (static_cast<std::uint32_t>(b[off]) << 24) |
           (static_cast<std::uint32_t>(b[off + 1]) << 16) |
           (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

} // namespace idx_detail

/// Parse a matched pair of IDX files (big-endian magic 0x803 images /
/// 0x801 labels), validating 28x28 geometry and count agreement.
inline MnistRaw parse_idx(const std::vector<std::uint8_t>& images_bytes,
                          const std::vector<std::uint8_t>& labels_bytes) {
    using idx_detail::read_be_u32;
    const std::uint32_t img_magic = read_be_u32(images_bytes, 0, "images magic");
    if (img_magic != 0x00000803u) {
        throw ParseError("images magic: wrong magic 0x" + [&] {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%08x", img_magic);
            return std::string(buf);
        }() + ", expected 0x00000803");
    }
    const std::uint32_t lbl_magic = read_be_u32(labels_bytes, 0, "labels magic");
    if (lbl_magic != 0x00000801u) {
        throw ParseError("labels magic: wrong magic, expected 0x00000801");
    }
    const std::uint32_t n_img = read_be_u32(images_bytes, 4, "images count");
    const std::uint32_t rows = read_be_u32(images_bytes, 8, "images rows");
    const std::uint32_t cols = read_be_u32(images_bytes, 12, "images cols");
    const std::uint32_t n_lbl = read_be_u32(labels_bytes, 4, "labels count");
    if (rows != 28 || cols != 28) {
        throw ParseError("images dims: expected 28x28, got " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
    if (n_img != n_lbl) {
        throw ParseError("count mismatch: " + std::to_string(n_img) + " images vs " +
                         std::to_string(n_lbl) + " labels");
    }
    const std::size_t pixel_count = static_cast<std::size_t>(n_img) * 28 * 28;
    if (images_bytes.size() < 16 + pixel_count) {
        throw ParseError("images payload: truncated, need " + std::to_string(16 + pixel_count) +
                         " bytes, have " + std::to_string(images_bytes.size()));
    }
    if (labels_bytes.size() < 8 + n_lbl) {
        throw ParseError("labels payload: truncated");
    }

    MnistRaw raw;
    raw.images = Tensor({static_cast<std::size_t>(n_img), 28, 28});
    for (std::size_t i = 0; i < pixel_count; ++i) {
        raw.images[i] = static_cast<double>(images_bytes[16 + i]) / 255.0;
    }
    raw.labels.resize(n_lbl);
    for (std::size_t i = 0; i < n_lbl; ++i) {
        const std::uint8_t v = labels_bytes[8 + i];
        if (v > 9) throw ParseError("labels payload: value " + std::to_string(v) + " at index " +
                                    std::to_string(i) + " out of 0..9");
        raw.labels[i] = v;
    }
    return raw;
}

inline std::vector<std::uint8_t> read_file_u8(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (f.bad()) throw IoError("read failed: " + path);
    return bytes;
}

inline MnistRaw load_mnist(const std::string& images_path, const std::string& labels_path) {
    return parse_idx(read_file_u8(images_path), read_file_u8(labels_path));
}

struct Rgb {
    double r = 0, g = 0, b = 0;

    bool operator==(const Rgb& o) const { return r == o.r && g == o.g && b == o.b; }
};

/// Ten maximally separated primaries/secondaries; index = class.
inline std::array<Rgb, 10> default_palette() {
    return {{{1.0, 0.0, 0.0},   // 0 red
             {0.0, 1.0, 0.0},   // 1 green
             {0.0, 0.0, 1.0},   // 2 blue
             {1.0, 1.0, 0.0},   // 3 yellow
             {1.0, 0.0, 1.0},   // 4 magenta
             {0.0, 1.0, 1.0},   // 5 cyan
             {1.0, 0.5, 0.0},   // 6 orange
             {0.5, 0.0, 1.0},   // 7 violet
             {0.0, 0.6, 0.3},   // 8 sea green
             {1.0, 1.0, 1.0}}}; // 9 white
}

struct BiasMeta {
    int color_index = -1;      // colored: palette row used
    int corner = -1;           // decoy: 0 TL, 1 TR, 2 BL, 3 BR
    int intensity_index = -1;  // decoy: which of the 10 class intensities
    double patch_intensity = 0.0;
};

struct BiasedExample {
    Tensor image;       // [3,28,28] in [0,1]
    int label = 0;
    Tensor clean_digit; // [28,28], untouched source digit
    BiasMeta bias;
};

struct DatasetSplit {
    std::vector<BiasedExample> train, val, test;
    DatasetKind kind = DatasetKind::colored;
    std::uint64_t seed = 0;
};

/// Stratified seeded split: per class, shuffle that class's indices with a
/// child stream and send round(fraction * classCount) of them to val.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_val_indices(
    const std::vector<int>& labels, double fraction, const SeededRng& run_rng) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ConfigError("split_train_val: fraction must be in (0,1), got " +
                          std::to_string(fraction));
    }
    std::array<std::vector<std::size_t>, 10> per_class;
    for (std::size_t i = 0; i < labels.size(); ++i)
        per_class[static_cast<std::size_t>(labels[i])].push_back(i);

    SeededRng base = run_rng.split(rng_keys::kTrainValSplit);
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t c = 0; c < 10; ++c) {
        SeededRng rng = base.split(c);
        rng.shuffle(per_class[c]);
        const auto n_val = static_cast<std::size_t>(
            std::llround(fraction * static_cast<double>(per_class[c].size())));
        for (std::size_t j = 0; j < per_class[c].size(); ++j) {
            (j < n_val ? val_idx : train_idx).push_back(per_class[c][j]);
        }
    }
    // Keep source order within each side so synthesis order is stable.
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    return {std::move(train_idx), std::move(val_idx)};
}

namespace synth_detail {

inline Tensor slice_digit(const MnistRaw& raw, std::size_t i) {
    Tensor d({28, 28});
    const double* src = raw.images.data() + i * 28 * 28;
    std::copy(src, src + 28 * 28, d.data());
    return d;
}

inline BiasedExample make_colored(const Tensor& clean, int label, const Rgb& color,
                                  int color_index) {
    BiasedExample ex;
    ex.label = label;
    ex.clean_digit = clean;
    ex.image = Tensor({3, 28, 28});
    const double ch[3] = {color.r, color.g, color.b};
    for (std::size_t c = 0; c < 3; ++c) {
        double* dst = ex.image.data() + c * 28 * 28;
        for (std::size_t i = 0; i < 28 * 28; ++i) dst[i] = clean[i] * ch[c];
    }
    ex.bias.color_index = color_index;
    return ex;
}

// Corner index -> top-left cell of its 4x4 region.
inline std::pair<std::size_t, std::size_t> corner_origin(int corner) {
    switch (corner) {
        case 0: return {0, 0};
        case 1: return {0, 24};
        case 2: return {24, 0};
        default: return {24, 24};
    }
}

inline BiasedExample make_decoy(const Tensor& clean, int label, int corner, int intensity_index) {
    BiasedExample ex;
    ex.label = label;
    ex.clean_digit = clean;
    const double intensity = (255.0 - 25.0 * intensity_index) / 255.0;

    Tensor gray = clean;
    const auto [r0, c0] = corner_origin(corner);
    for (std::size_t dr = 0; dr < 4; ++dr) {
        for (std::size_t dc = 0; dc < 4; ++dc) {
            double& px = gray.at2(r0 + dr, c0 + dc);
            // The patch fills background only; digit strokes stay on top.
            if (px == 0.0) px = intensity;
        }
    }
    ex.image = Tensor({3, 28, 28});
    for (std::size_t c = 0; c < 3; ++c) {
        std::copy(gray.data(), gray.data() + 28 * 28, ex.image.data() + c * 28 * 28);
    }
    ex.bias.corner = corner;
    ex.bias.intensity_index = intensity_index;
    ex.bias.patch_intensity = intensity;
    return ex;
}

} // namespace synth_detail

/// ColoredMNIST: train/val tint class y with palette[y]; test uses the
/// reversed mapping palette[9-y]. The digit itself is the only foreground.
inline DatasetSplit synth_colored_mnist(const MnistRaw& train_raw, const MnistRaw& test_raw,
                                        std::uint64_t seed,
                                        const std::array<Rgb, 10>& palette = default_palette(),
                                        double val_fraction = 0.1) {
    for (std::size_t a = 0; a < 10; ++a) {
        for (std::size_t b = a + 1; b < 10; ++b) {
            if (palette[a] == palette[b]) {
                throw ConfigError("palette entries " + std::to_string(a) + " and " +
                                  std::to_string(b) + " are identical");
            }
        }
    }
    DatasetSplit split;
    split.kind = DatasetKind::colored;
    split.seed = seed;
    SeededRng run_rng(seed);
    auto [train_idx, val_idx] = split_train_val_indices(train_raw.labels, val_fraction, run_rng);

    auto synth_train_like = [&](const std::vector<std::size_t>& idx,
                                std::vector<BiasedExample>& out) {
        out.reserve(idx.size());
        for (std::size_t i : idx) {
            const int y = train_raw.labels[i];
            out.push_back(synth_detail::make_colored(synth_detail::slice_digit(train_raw, i), y,
                                                     palette[static_cast<std::size_t>(y)], y));
        }
    };
    synth_train_like(train_idx, split.train);
    synth_train_like(val_idx, split.val);

    split.test.reserve(test_raw.count());
    for (std::size_t i = 0; i < test_raw.count(); ++i) {
        const int y = test_raw.labels[i];
        const int rev = 9 - y;
        split.test.push_back(synth_detail::make_colored(synth_detail::slice_digit(test_raw, i), y,
                                                        palette[static_cast<std::size_t>(rev)],
                                                        rev));
    }
    return split;
}

/// DecoyMNIST: a 4x4 gray corner patch, intensity (255-25y)/255 on train/val,
/// intensity drawn independently of y on test; corner uniform either way.
inline DatasetSplit synth_decoy_mnist(const MnistRaw& train_raw, const MnistRaw& test_raw,
                                      std::uint64_t seed, double val_fraction = 0.1) {
    DatasetSplit split;
    split.kind = DatasetKind::decoy;
    split.seed = seed;
    SeededRng run_rng(seed);
    auto [train_idx, val_idx] = split_train_val_indices(train_raw.labels, val_fraction, run_rng);

    SeededRng synth_base = run_rng.split(rng_keys::kDecoySynth);
    SeededRng train_base = synth_base.split(0);
    SeededRng test_base = synth_base.split(1);

    auto synth_train_like = [&](const std::vector<std::size_t>& idx,
                                std::vector<BiasedExample>& out) {
        out.reserve(idx.size());
        for (std::size_t i : idx) {
            SeededRng rng = train_base.split(i); // keyed by source index
            const int corner = static_cast<int>(rng.next_below(4));
            const int y = train_raw.labels[i];
            out.push_back(synth_detail::make_decoy(synth_detail::slice_digit(train_raw, i), y,
                                                   corner, y));
        }
    };
    synth_train_like(train_idx, split.train);
    synth_train_like(val_idx, split.val);

    split.test.reserve(test_raw.count());
    for (std::size_t i = 0; i < test_raw.count(); ++i) {
        SeededRng rng = test_base.split(i);
        const int corner = static_cast<int>(rng.next_below(4));
        const int intensity_index = static_cast<int>(rng.next_below(10));
        split.test.push_back(synth_detail::make_decoy(synth_detail::slice_digit(test_raw, i),
                                                      test_raw.labels[i], corner,
                                                      intensity_index));
    }
    return split;
}

inline RgbImage example_to_rgb(const BiasedExample& ex) {
    RgbImage img(28, 28);
    for (std::size_t p = 0; p < 28 * 28; ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
            img.pixels[3 * p + c] = quantize_u8(ex.image[c * 28 * 28 + p]);
        }
    }
    return img;
}

/// First `count` examples of each split as P6 previews named
/// <split>_<index>_label<y>.ppm.
inline std::vector<std::string> export_examples_ppm(const DatasetSplit& split,
                                                    const std::string& directory,
                                                    std::size_t count) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(directory, ec);
    if (ec) throw IoError("cannot create directory " + directory + ": " + ec.message());

    std::vector<std::string> written;
    auto dump = [&](const char* name, const std::vector<BiasedExample>& exs) {
        for (std::size_t i = 0; i < count && i < exs.size(); ++i) {
            const std::string path = directory + "/" + name + "_" + std::to_string(i) + "_label" +
                                     std::to_string(exs[i].label) + ".ppm";
            write_ppm(example_to_rgb(exs[i]), path);
            written.push_back(path);
        }
    };
    dump("train", split.train);
    dump("val", split.val);
    dump("test", split.test);
    return written;
}

} // namespace attnalign
