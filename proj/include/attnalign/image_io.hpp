#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "attnalign/errors.hpp"

namespace attnalign {

struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels; // 3 bytes per pixel, row-major RGB

    RgbImage() = default;
    RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(3 * h * w, 0) {}
};

struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}
};

inline std::string encode_ppm(const RgbImage& img) {
    std::ostringstream out;
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    return out.str();
}

inline std::string encode_pgm(const GrayImage& img) {
    std::ostringstream out;
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    return out.str();
}

namespace pnm_detail {

inline std::size_t parse_header(const std::string& bytes, const char* magic,
                                const std::string& origin, std::size_t& h, std::size_t& w) {
    if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
        throw ParseError(origin + ": wrong magic, expected " + magic);
    }
    std::size_t pos = 2;
    long fields[3];
    for (int f = 0; f < 3; ++f) {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw ParseError(origin + ": malformed header");
        fields[f] = std::stol(bytes.substr(start, pos - start));
    }
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw ParseError(origin + ": malformed header");
    }
    ++pos; // the single whitespace byte before the payload
    if (fields[2] != 255) throw ParseError(origin + ": expected maxval 255");
    w = static_cast<std::size_t>(fields[0]);
    h = static_cast<std::size_t>(fields[1]);
    return pos;
}

} // namespace pnm_detail

inline RgbImage decode_ppm(const std::string& bytes, const std::string& origin) {
    std::size_t h = 0, w = 0;
    const std::size_t pos = pnm_detail::parse_header(bytes, "P6", origin, h, w);
    RgbImage img(h, w);
    if (bytes.size() - pos < img.pixels.size()) {
        throw ParseError(origin + ": truncated pixel payload");
    }
    std::copy_n(reinterpret_cast<const std::uint8_t*>(bytes.data()) + pos, img.pixels.size(),
                img.pixels.begin());
    return img;
}

inline GrayImage decode_pgm(const std::string& bytes, const std::string& origin) {
    std::size_t h = 0, w = 0;
    const std::size_t pos = pnm_detail::parse_header(bytes, "P5", origin, h, w);
    GrayImage img(h, w);
    if (bytes.size() - pos < img.pixels.size()) {
        throw ParseError(origin + ": truncated pixel payload");
    }
    std::copy_n(reinterpret_cast<const std::uint8_t*>(bytes.data()) + pos, img.pixels.size(),
                img.pixels.begin());
    return img;
}

inline void write_ppm(const RgbImage& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    const std::string bytes = encode_ppm(img);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline void write_pgm(const GrayImage& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    const std::string bytes = encode_pgm(img);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

/// 0..1 doubles -> quantized byte with round-half-up, clamped.
inline std::uint8_t quantize_u8(double v) {
    if (v <= 0.0) return 0;
    if (v >= 1.0) return 255;
    return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

} // namespace attnalign
