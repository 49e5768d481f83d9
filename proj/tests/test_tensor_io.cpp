#include <cstdio>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "aggvpr/rng.hpp"
#include "aggvpr/tensor_io.hpp"

using namespace aggvpr;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(TensorArchive, RoundTripPreservesEverything) {
    Rng rng(100);
    std::vector<NamedTensor> tensors;
    tensors.push_back({"block0.qkv.w", Tensor::gaussian({4, 12}, rng, 1.0)});
    tensors.push_back({"pos", Tensor::gaussian({5, 4}, rng, 0.02)});
    tensors.push_back({"agg", Tensor::gaussian({2, 4}, rng, 1.0)});
    const std::string path = temp_path("roundtrip.imgt");
    save_tensor_archive(path, tensors);
    const auto loaded = load_tensor_archive(path);
    ASSERT_EQ(loaded.size(), tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        EXPECT_EQ(loaded[i].name, tensors[i].name);
        ASSERT_EQ(loaded[i].value.shape(), tensors[i].value.shape());
        for (std::size_t j = 0; j < tensors[i].value.numel(); ++j)
            EXPECT_EQ(loaded[i].value.at(j), tensors[i].value.at(j));
    }
}

TEST(TensorArchive, HeaderLayoutIsExact) {
    const std::string path = temp_path("header.imgt");
    save_tensor_archive(path, {{"ab", Tensor::from_data({1}, {1.5})}});
    std::ifstream is(path, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    // magic, version(4), count(4), namelen(2), name(2), rank(1), extent(8), f64(8)
    ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 + 2 + 1 + 8 + 8);
    EXPECT_EQ(bytes[0], 'I');
    EXPECT_EQ(bytes[1], 'M');
    EXPECT_EQ(bytes[2], 'G');
    EXPECT_EQ(bytes[3], 'T');
    EXPECT_EQ(bytes[4], 1);   // version, little-endian
    EXPECT_EQ(bytes[8], 1);   // count
    EXPECT_EQ(bytes[12], 2);  // name length
    EXPECT_EQ(bytes[14], 'a');
    EXPECT_EQ(bytes[16], 1);  // rank
    EXPECT_EQ(bytes[17], 1);  // extent low byte
}

TEST(TensorArchive, BadMagicRejected) {
    const std::string path = temp_path("bad.imgt");
    std::ofstream(path, std::ios::binary) << "NOPE garbage";
    EXPECT_THROW(load_tensor_archive(path), ParseError);
}

TEST(TensorArchive, TruncatedFileRejected) {
    const std::string path = temp_path("trunc.imgt");
    save_tensor_archive(path, {{"x", Tensor::from_data({4}, {1, 2, 3, 4})}});
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 9);
    EXPECT_THROW(load_tensor_archive(path), ParseError);
}

TEST(Descriptors, RoundTrip) {
    Rng rng(101);
    DescriptorSet set;
    set.count = 3;
    set.dim = 8;
    set.values.resize(24);
    for (double& v : set.values) v = rng.next_gaussian();
    const std::string path = temp_path("desc.imgd");
    save_descriptors(path, set);
    const DescriptorSet loaded = load_descriptors(path);
    EXPECT_EQ(loaded.count, set.count);
    EXPECT_EQ(loaded.dim, set.dim);
    for (std::size_t i = 0; i < set.values.size(); ++i) EXPECT_EQ(loaded.values[i], set.values[i]);
}

TEST(Descriptors, BadMagicRejected) {
    const std::string path = temp_path("bad.imgd");
    std::ofstream(path, std::ios::binary) << "IMGT";  // wrong family
    EXPECT_THROW(load_descriptors(path), ParseError);
}
