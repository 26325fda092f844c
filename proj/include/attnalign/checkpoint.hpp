#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "attnalign/errors.hpp"
#include "attnalign/nn.hpp"
#include "attnalign/tensor.hpp"

namespace attnalign {

// Checkpoint file layout (all integers little-endian):
//   8 bytes  magic "ATNCKPT\0"
//   u32      format version (1)
//   u32      tensor count
//   per tensor:
//     u32      name length, then that many name bytes
//     u32      rank, then rank u64 dims
//     dim-product f64 values (IEEE-754 bit patterns)
// Round trip is bit-exact.
namespace ckpt_detail {

inline constexpr char kMagic[8] = {'A', 'T', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(out, bits);
}

struct Reader {
    const unsigned char* p;
    std::size_t left;
    std::string where;

    void need(std::size_t n, const char* what) const {
        if (left < n) throw ParseError(where + ": truncated while reading " + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        p += 4;
        left -= 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        p += 8;
        left -= 8;
        return v;
    }
    double f64(const char* what) {
        std::uint64_t bits = u64(what);
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
};

} // namespace ckpt_detail

inline std::string encode_named_tensors(const std::vector<std::string>& names,
                                        const std::vector<const Tensor*>& tensors) {
    if (names.size() != tensors.size()) {
        throw DimensionError("encode_named_tensors: name/tensor count mismatch");
    }
    std::string out;
    out.append(ckpt_detail::kMagic, sizeof ckpt_detail::kMagic);
    ckpt_detail::put_u32(out, ckpt_detail::kVersion);
    ckpt_detail::put_u32(out, static_cast<std::uint32_t>(names.size()));
    for (std::size_t t = 0; t < names.size(); ++t) {
        ckpt_detail::put_u32(out, static_cast<std::uint32_t>(names[t].size()));
        out.append(names[t]);
        const Tensor& ten = *tensors[t];
        ckpt_detail::put_u32(out, static_cast<std::uint32_t>(ten.rank()));
        for (std::size_t d = 0; d < ten.rank(); ++d) ckpt_detail::put_u64(out, ten.dim(d));
        for (std::size_t i = 0; i < ten.size(); ++i) ckpt_detail::put_f64(out, ten[i]);
    }
    return out;
}

inline std::vector<std::pair<std::string, Tensor>> decode_named_tensors(
    const std::string& bytes, const std::string& origin) {
    ckpt_detail::Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
                          origin};
    r.need(sizeof ckpt_detail::kMagic, "magic");
    if (std::memcmp(r.p, ckpt_detail::kMagic, sizeof ckpt_detail::kMagic) != 0) {
        throw ParseError(origin + ": wrong magic, not a checkpoint file");
    }
    r.p += sizeof ckpt_detail::kMagic;
    r.left -= sizeof ckpt_detail::kMagic;
    const std::uint32_t version = r.u32("version");
    if (version != ckpt_detail::kVersion) {
        throw ParseError(origin + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32("tensor count");
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = r.u32("name length");
        r.need(name_len, "tensor name");
        std::string name(reinterpret_cast<const char*>(r.p), name_len);
        r.p += name_len;
        r.left -= name_len;
        const std::uint32_t rank = r.u32("rank");
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::size_t>(r.u64("dim"));
            n *= shape[d];
        }
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) data[i] = r.f64("tensor data");
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline std::string read_file_string(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw IoError("read failed: " + path);
    return bytes;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
    write_file_bytes(path,
                     encode_named_tensors(param_names(), param_tensors(params)));
}

inline ModelParams load_checkpoint(const std::string& path) {
    auto entries = decode_named_tensors(read_file_string(path), path);
    const auto names = param_names();
    if (entries.size() != names.size()) {
        throw ParseError(path + ": expected " + std::to_string(names.size()) +
                         " tensors, found " + std::to_string(entries.size()));
    }
    ModelParams p = ModelParams::create_zero();
    auto slots = param_tensors(p);
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (entries[i].first != names[i]) {
            throw ParseError(path + ": tensor " + std::to_string(i) + " named '" +
                             entries[i].first + "', expected '" + names[i] + "'");
        }
        if (!entries[i].second.same_shape(*slots[i])) {
            throw ParseError(path + ": tensor '" + names[i] + "' has shape " +
                             Tensor::shape_string(entries[i].second.shape()) + ", expected " +
                             Tensor::shape_string(slots[i]->shape()));
        }
        *slots[i] = std::move(entries[i].second);
    }
    return p;
}

} // namespace attnalign
