#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "aggvpr/errors.hpp"
#include "aggvpr/tensor.hpp"

namespace aggvpr {

/// 8-bit interleaved RGB image.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // h*w*3, row-major, RGB

    std::uint8_t& at(int y, int x, int c) { return pixels[(y * width + x) * 3 + c]; }
    std::uint8_t at(int y, int x, int c) const { return pixels[(y * width + x) * 3 + c]; }
};

namespace detail {

// Reads the next ASCII integer in a PNM header, skipping whitespace and
// '#' comments.
inline int pnm_read_int(std::istream& is, const std::string& path) {
    int c = is.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = is.get();
        c = is.get();
    }
    if (c == EOF || !std::isdigit(c)) throw ParseError(path + ": malformed PNM header");
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = is.get();
    }
    return value;
}

}  // namespace detail

/// Binary PPM (P6, maxval 255).
inline void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
    if (!os) throw IoError("write failed: " + path);
}

inline ImageU8 read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '6') throw ParseError(path + ": expected binary PPM (P6)");
    ImageU8 img;
    img.width = detail::pnm_read_int(is, path);
    img.height = detail::pnm_read_int(is, path);
    const int maxval = detail::pnm_read_int(is, path);
    if (maxval != 255) throw ParseError(path + ": unsupported maxval " + std::to_string(maxval));
    if (img.width <= 0 || img.height <= 0) throw ParseError(path + ": bad dimensions");
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    if (!is.read(reinterpret_cast<char*>(img.pixels.data()),
                 static_cast<std::streamsize>(img.pixels.size())))
        throw ParseError(path + ": truncated pixel data");
    return img;
}

/// Binary PGM (P5, maxval 65535); sample bytes are most-significant first
/// as the format requires.
inline void write_pgm16(const std::string& path, int width, int height,
                        const std::vector<std::uint16_t>& samples) {
    if (static_cast<std::size_t>(width) * height != samples.size())
        throw ContractError("write_pgm16: sample count does not match dimensions");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "P5\n" << width << " " << height << "\n65535\n";
    for (std::uint16_t s : samples) {
        const char bytes[2] = {static_cast<char>(s >> 8), static_cast<char>(s & 0xff)};
        os.write(bytes, 2);
    }
    if (!os) throw IoError("write failed: " + path);
}

struct Pgm16 {
    int width = 0;
    int height = 0;
    std::vector<std::uint16_t> samples;
};

inline Pgm16 read_pgm16(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '5') throw ParseError(path + ": expected binary PGM (P5)");
    Pgm16 img;
    img.width = detail::pnm_read_int(is, path);
    img.height = detail::pnm_read_int(is, path);
    const int maxval = detail::pnm_read_int(is, path);
    if (maxval != 65535) throw ParseError(path + ": unsupported maxval " + std::to_string(maxval));
    img.samples.resize(static_cast<std::size_t>(img.width) * img.height);
    for (std::uint16_t& s : img.samples) {
        const int hi = is.get(), lo = is.get();
        if (lo == EOF) throw ParseError(path + ": truncated pixel data");
        s = static_cast<std::uint16_t>((hi << 8) | lo);
    }
    return img;
}

/// Converts to a [3×H×W] tensor with values in [0, 1].
inline Tensor image_to_tensor(const ImageU8& img) {
    const std::size_t h = static_cast<std::size_t>(img.height);
    const std::size_t w = static_cast<std::size_t>(img.width);
    Tensor t = Tensor::zeros({3, h, w});
    double* p = t.mutable_data().data();
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                p[(c * h + y) * w + x] = img.pixels[(y * w + x) * 3 + c] / 255.0;
    return t;
}

}  // namespace aggvpr
