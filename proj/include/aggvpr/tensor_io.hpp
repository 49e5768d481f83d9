#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "aggvpr/errors.hpp"
#include "aggvpr/tensor.hpp"

namespace aggvpr {

struct NamedTensor {
    std::string name;
    Tensor value;
};

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T>);
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    put_bytes(os, buf, sizeof(T));
}

inline void put_f64_le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_le<std::uint64_t>(os, bits);
}

template <typename T>
T get_le(std::istream& is, const std::string& path) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T)))
        throw ParseError(path + ": truncated file");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

inline double get_f64_le(std::istream& is, const std::string& path) {
    const std::uint64_t bits = get_le<std::uint64_t>(is, path);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

// Tensor archive ("IMGT"): magic, version u32, tensor count u32, then per
// tensor: name length u16 + UTF-8 name, rank u8, extents u64 LE, data f64 LE.
inline constexpr char kTensorArchiveMagic[4] = {'I', 'M', 'G', 'T'};
inline constexpr std::uint32_t kTensorArchiveVersion = 1;

inline void save_tensor_archive(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    detail::put_bytes(os, kTensorArchiveMagic, 4);
    detail::put_le<std::uint32_t>(os, kTensorArchiveVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const NamedTensor& nt : tensors) {
        if (nt.name.size() > 0xffff) throw ContractError("tensor name too long: " + nt.name);
        detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(nt.name.size()));
        detail::put_bytes(os, nt.name.data(), nt.name.size());
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(nt.value.rank()));
        for (std::size_t e : nt.value.shape()) detail::put_le<std::uint64_t>(os, e);
        for (double v : nt.value.data()) detail::put_f64_le(os, v);
    }
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<NamedTensor> load_tensor_archive(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kTensorArchiveMagic, 4) != 0)
        throw ParseError(path + ": not a tensor archive (bad magic)");
    const auto version = detail::get_le<std::uint32_t>(is, path);
    if (version != kTensorArchiveVersion)
        throw ParseError(path + ": unsupported archive version " + std::to_string(version));
    const auto count = detail::get_le<std::uint32_t>(is, path);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto name_len = detail::get_le<std::uint16_t>(is, path);
        std::string name(name_len, '\0');
        if (name_len && !is.read(name.data(), name_len)) throw ParseError(path + ": truncated name");
        const auto rank = detail::get_le<std::uint8_t>(is, path);
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (auto& e : shape) {
            e = static_cast<std::size_t>(detail::get_le<std::uint64_t>(is, path));
            if (e == 0) throw ParseError(path + ": zero extent in tensor " + name);
            numel *= e;
        }
        std::vector<double> data(numel);
        for (double& v : data) v = detail::get_f64_le(is, path);
        out.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(data))});
    }
    return out;
}

// Descriptor file ("IMGD"): magic, version u32, count u32, dim u32, then
// count rows of dim f64 LE; row order matches the source manifest.
inline constexpr char kDescriptorMagic[4] = {'I', 'M', 'G', 'D'};
inline constexpr std::uint32_t kDescriptorVersion = 1;

struct DescriptorSet {
    std::uint32_t count = 0;
    std::uint32_t dim = 0;
    std::vector<double> values;  // row-major count*dim

    std::span<const double> row(std::size_t i) const {
        return {values.data() + i * dim, dim};
    }
};

inline void save_descriptors(const std::string& path, const DescriptorSet& set) {
    if (set.values.size() != static_cast<std::size_t>(set.count) * set.dim)
        throw ContractError("descriptor buffer does not match count*dim");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    detail::put_bytes(os, kDescriptorMagic, 4);
    detail::put_le<std::uint32_t>(os, kDescriptorVersion);
    detail::put_le<std::uint32_t>(os, set.count);
    detail::put_le<std::uint32_t>(os, set.dim);
    for (double v : set.values) detail::put_f64_le(os, v);
    if (!os) throw IoError("write failed: " + path);
}

inline DescriptorSet load_descriptors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kDescriptorMagic, 4) != 0)
        throw ParseError(path + ": not a descriptor file (bad magic)");
    const auto version = detail::get_le<std::uint32_t>(is, path);
    if (version != kDescriptorVersion)
        throw ParseError(path + ": unsupported descriptor version " + std::to_string(version));
    DescriptorSet set;
    set.count = detail::get_le<std::uint32_t>(is, path);
    set.dim = detail::get_le<std::uint32_t>(is, path);
    set.values.resize(static_cast<std::size_t>(set.count) * set.dim);
    for (double& v : set.values) v = detail::get_f64_le(is, path);
    return set;
}

}  // namespace aggvpr
