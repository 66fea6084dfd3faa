// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <zlib.h>

#include "flatmae/common.hpp"
#include "flatmae/io.hpp"

namespace flatmae {

// RGB8 image buffer.
struct Image {
  std::uint32_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // 3 * width * height, row-major

  Image() = default;
  Image(std::uint32_t w, std::uint32_t h, std::uint8_t fill = 0)
      : width(w), height(h), rgb(std::size_t(3) * w * h, fill) {}

  void set(std::uint32_t x, std::uint32_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    std::size_t i = 3 * (std::size_t(y) * width + x);
    rgb[i] = r;
    rgb[i + 1] = g;
    rgb[i + 2] = b;
  }
};

namespace detail {

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
  auto be32 = [&](std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
  };
  be32(static_cast<std::uint32_t>(data.size()));
  std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0L, out.data() + crc_start, static_cast<uInt>(4 + data.size())));
  be32(crc);
}

}  // namespace detail

// Minimal PNG encoder (8-bit RGB, zlib level 6, filter 0). Output bytes are
// a pure function of the pixel data.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.rgb.size() != std::size_t(3) * img.width * img.height)
    throw DimensionError("image buffer does not match dims");
  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};

  std::vector<std::uint8_t> ihdr;
  auto be32 = [&](std::uint32_t v) {
    ihdr.push_back(std::uint8_t(v >> 24));
    ihdr.push_back(std::uint8_t(v >> 16));
    ihdr.push_back(std::uint8_t(v >> 8));
    ihdr.push_back(std::uint8_t(v));
  };
  be32(img.width);
  be32(img.height);
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::png_chunk(out, "IHDR", ihdr);

  // scanlines with filter byte 0
  std::vector<std::uint8_t> raw;
  raw.reserve((std::size_t(3) * img.width + 1) * img.height);
  for (std::uint32_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    const std::uint8_t* row = img.rgb.data() + std::size_t(3) * img.width * y;
    raw.insert(raw.end(), row, row + std::size_t(3) * img.width);
  }
  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw Error("zlib compression failed");
  compressed.resize(bound);
  detail::png_chunk(out, "IDAT", compressed);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline void save_png(const Image& img, const std::string& path) {
  auto bytes = encode_png(img);
  ByteWriter w;
  w.raw(bytes.data(), bytes.size());
  w.to_file(path);
}

}  // namespace flatmae
