#pragma once

#include <cmath>
#include <cstdio>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "duet/tensor.hpp"

namespace duet {

// Images are [3, H, W] tensors with values in [0, 1]. Raster storage is
// binary PPM (P6, 8-bit): lossless for the k/255 grid we quantize to.

inline std::uint8_t quantize_channel(double v) {
    double c = std::min(1.0, std::max(0.0, v));
    return std::uint8_t(std::lround(c * 255.0));
}

// Snap every channel to the 8-bit grid so raster round-trips are bit-exact.
inline Tensor quantize_image(const Tensor& img) {
    Tensor out = img;
    for (auto& v : out.data) v = double(quantize_channel(v)) / 255.0;
    return out;
}

inline std::string encode_ppm(const Tensor& img) {
    if (img.ndim() != 3 || img.shape[0] != 3) throw input_error("encode_ppm: expected [3, H, W]");
    std::int64_t h = img.shape[1], w = img.shape[2];
    std::ostringstream os;
    os << "P6\n" << w << " " << h << "\n255\n";
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t c = 0; c < 3; ++c)
                os.put(char(quantize_channel(img.at(c, y, x))));
    return os.str();
}

inline Tensor decode_ppm(const std::string& bytes) {
    std::istringstream is(bytes);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw io_error("decode_ppm: not a binary PPM");
    auto skip_space_and_comments = [&] {
        while (true) {
            int c = is.peek();
            if (c == '#') {
                std::string line;
                std::getline(is, line);
            } else if (std::isspace(c)) {
                is.get();
            } else {
                break;
            }
        }
    };
    skip_space_and_comments();
    std::int64_t w, h, maxval;
    is >> w;
    skip_space_and_comments();
    is >> h;
    skip_space_and_comments();
    is >> maxval;
    if (!is || w <= 0 || h <= 0 || maxval != 255) throw io_error("decode_ppm: bad header");
    is.get();  // single whitespace after maxval
    Tensor img({3, h, w});
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t c = 0; c < 3; ++c) {
                int byte = is.get();
                if (byte == EOF) throw io_error("decode_ppm: truncated pixel data");
                img.at(c, y, x) = double(byte) / 255.0;
            }
    return img;
}

inline void write_ppm(const std::string& path, const Tensor& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot write image: " + path);
    std::string bytes = encode_ppm(img);
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw io_error("failed writing image: " + path);
}

inline Tensor read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot read image: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return decode_ppm(buf.str());
}

// Bilinear resampling with corner alignment: output corner samples coincide
// with input corners, and linear ramps are reproduced exactly.
inline Tensor bilinear_resize(const Tensor& img, std::int64_t out_h, std::int64_t out_w) {
    if (img.ndim() != 3) throw input_error("bilinear_resize: expected [C, H, W]");
    std::int64_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
    Tensor out({C, out_h, out_w});
    double sy = out_h > 1 ? double(H - 1) / double(out_h - 1) : 0.0;
    double sx = out_w > 1 ? double(W - 1) / double(out_w - 1) : 0.0;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < out_h; ++y) {
            double fy = double(y) * sy;
            std::int64_t y0 = std::int64_t(fy);
            std::int64_t y1 = std::min(y0 + 1, H - 1);
            double wy = fy - double(y0);
            for (std::int64_t x = 0; x < out_w; ++x) {
                double fx = double(x) * sx;
                std::int64_t x0 = std::int64_t(fx);
                std::int64_t x1 = std::min(x0 + 1, W - 1);
                double wx = fx - double(x0);
                double top = img.at(c, y0, x0) * (1.0 - wx) + img.at(c, y0, x1) * wx;
                double bot = img.at(c, y1, x0) * (1.0 - wx) + img.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1.0 - wy) + bot * wy;
            }
        }
    return out;
}

}  // namespace duet
