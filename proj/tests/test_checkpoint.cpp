#include <gtest/gtest.h>

#include <cmath>
#include <utility>
#include <string>
#include <vector>

#include "attnalign/checkpoint.hpp"
#include "attnalign/nn.hpp"

using namespace attnalign;

TEST(Checkpoint, RoundTripIsBitExact) {
    SeededRng rng(71);
    ModelParams p = ModelParams::init(rng);
    // make the payload exercise more bit patterns than plain uniforms
    p.conv1.bias[0] = 0.0;
    p.conv1.bias[1] = -0.0;
    p.conv2.bias[0] = 1e-308; // subnormal territory survives too
    p.head.bias[3] = -1234.5678e12;

    const std::string path = testing::TempDir() + "ckpt_test.bin";
    save_checkpoint(p, path);
    ModelParams q = load_checkpoint(path);

    auto ta = param_tensors(p);
    auto tb = param_tensors(q);
    for (std::size_t t = 0; t < ta.size(); ++t) {
        ASSERT_EQ(ta[t]->shape(), tb[t]->shape());
        for (std::size_t i = 0; i < ta[t]->size(); ++i) {
            std::uint64_t ba, bb;
            std::memcpy(&ba, &(*ta[t])[i], 8);
            std::memcpy(&bb, &(*tb[t])[i], 8);
            EXPECT_EQ(ba, bb) << "tensor " << t << " index " << i;
        }
    }

    // and the byte stream itself is reproducible
    const std::string once = encode_named_tensors(param_names(), param_tensors(std::as_const(p)));
    const std::string twice = encode_named_tensors(param_names(), param_tensors(std::as_const(q)));
    EXPECT_EQ(once, twice);
}

TEST(Checkpoint, EncodeLayout) {
    Tensor t({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    std::string bytes = encode_named_tensors({"w"}, {&t});
    // 8 magic + 4 version + 4 count + (4 + 1 name) + 4 rank + 2*8 dims + 6*8 data
    EXPECT_EQ(bytes.size(), 8u + 4 + 4 + 5 + 4 + 16 + 48);
    EXPECT_EQ(bytes.substr(0, 7), "ATNCKPT");
    EXPECT_EQ(bytes[7], '\0');

    auto decoded = decode_named_tensors(bytes, "buf");
    ASSERT_EQ(decoded.size(), 1u);
    EXPECT_EQ(decoded[0].first, "w");
    EXPECT_EQ(decoded[0].second.shape(), (std::vector<std::size_t>{2, 3}));
    for (std::size_t i = 0; i < 6; ++i)
        EXPECT_EQ(decoded[0].second[i], static_cast<double>(i + 1));

    EXPECT_THROW(encode_named_tensors({"a", "b"}, {&t}), DimensionError);
}

TEST(Checkpoint, CorruptionErrors) {
    SeededRng rng(73);
    ModelParams p = ModelParams::init(rng);
    std::string bytes = encode_named_tensors(param_names(), param_tensors(std::as_const(p)));

    std::string wrong_magic = bytes;
    wrong_magic[0] = 'X';
    EXPECT_THROW(decode_named_tensors(wrong_magic, "buf"), ParseError);

    std::string bad_version = bytes;
    bad_version[8] = 9;
    EXPECT_THROW(decode_named_tensors(bad_version, "buf"), ParseError);

    std::string truncated = bytes.substr(0, bytes.size() / 2);
    EXPECT_THROW(decode_named_tensors(truncated, "buf"), ParseError);

    EXPECT_THROW(load_checkpoint(testing::TempDir() + "no_such_ckpt.bin"), IoError);
}

TEST(Checkpoint, LoadValidatesNamesAndShapes) {
    SeededRng rng(79);
    ModelParams p = ModelParams::init(rng);
    const std::string path = testing::TempDir() + "ckpt_mangle.bin";

    // wrong tensor name in slot 0
    auto names = param_names();
    names[0] = "conv1.kernel";
    write_file_bytes(path, encode_named_tensors(names, param_tensors(std::as_const(p))));
    EXPECT_THROW(load_checkpoint(path), ParseError);

    // wrong shape: swap two tensors so names match but shapes do not
    auto tensors = param_tensors(std::as_const(p));
    std::swap(tensors[0], tensors[2]);
    write_file_bytes(path, encode_named_tensors(param_names(), tensors));
    EXPECT_THROW(load_checkpoint(path), ParseError);

    // wrong tensor count
    auto short_names = param_names();
    short_names.pop_back();
    auto short_tensors = param_tensors(std::as_const(p));
    short_tensors.pop_back();
    write_file_bytes(path, encode_named_tensors(short_names, short_tensors));
    EXPECT_THROW(load_checkpoint(path), ParseError);
}
