// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hrda/common.hpp"

// Minimal 8-bit PNG reader/writer: grayscale, RGB and paletted images, which
// is all the artifact needs. Writes filter 0 rows; reads all five filters.
namespace hrda::png {

struct PngImage {
  int width = 0, height = 0;
  int color_type = 0;  // 0 gray, 2 rgb, 3 palette
  std::vector<std::uint8_t> data;  // gray/palette: w*h, rgb: 3*w*h
  std::vector<std::array<std::uint8_t, 3>> palette;

  int channels() const { return color_type == 2 ? 3 : 1; }
};

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_be32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void write_chunk(std::vector<std::uint8_t>& out, const char* type,
                        const std::vector<std::uint8_t>& payload) {
  put_be32(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_be32(out, crc);
}

inline std::vector<std::uint8_t> deflate_bytes(const std::vector<std::uint8_t>& raw,
                                               const std::string& path) {
  uLongf dst_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> dst(dst_len);
  int rc = compress2(dst.data(), &dst_len, raw.data(), static_cast<uLong>(raw.size()),
                     Z_DEFAULT_COMPRESSION);
  if (rc != Z_OK) fail("png: zlib compression failed for " + path);
  dst.resize(dst_len);
  return dst;
}

inline std::uint8_t paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

inline void write_png(const std::string& path, int w, int h, int color_type,
                      const std::vector<std::uint8_t>& pixels,
                      const std::vector<std::array<std::uint8_t, 3>>& palette) {
  check(w > 0 && h > 0, "png: image must be non-empty: " + path);
  int bpp = color_type == 2 ? 3 : 1;
  check(pixels.size() == static_cast<std::size_t>(w) * h * bpp,
        "png: pixel buffer size does not match " + std::to_string(w) + "x" + std::to_string(h) +
            " for " + path);
  if (color_type == 3) {
    check(!palette.empty() && palette.size() <= 256, "png: palette must have 1..256 entries");
    for (std::uint8_t v : pixels)
      check(v < palette.size(), "png: palette index out of range in " + path);
  }

  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * bpp));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    const std::uint8_t* row = pixels.data() + static_cast<std::size_t>(y) * w * bpp;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(w) * bpp);
  }

  std::vector<std::uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(w));
  put_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(static_cast<std::uint8_t>(color_type));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(out, "IHDR", ihdr);
  if (color_type == 3) {
    std::vector<std::uint8_t> plte;
    for (const auto& c : palette) plte.insert(plte.end(), c.begin(), c.end());
    write_chunk(out, "PLTE", plte);
  }
  write_chunk(out, "IDAT", deflate_bytes(raw, path));
  write_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) fail("png: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) fail("png: write failed for " + path);
}

}  // namespace detail

inline void write_png_gray(const std::string& path, int w, int h,
                           const std::vector<std::uint8_t>& pixels) {
  detail::write_png(path, w, h, 0, pixels, {});
}

inline void write_png_rgb(const std::string& path, int w, int h,
                          const std::vector<std::uint8_t>& pixels) {
  detail::write_png(path, w, h, 2, pixels, {});
}

inline void write_png_palette(const std::string& path, int w, int h,
                              const std::vector<std::uint8_t>& indices,
                              const std::vector<std::array<std::uint8_t, 3>>& palette) {
  detail::write_png(path, w, h, 3, indices, palette);
}

inline PngImage read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("png: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    fail("png: " + path + " is not a PNG file");

  PngImage img;
  int bit_depth = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  bool saw_end = false;
  while (pos + 8 <= bytes.size() && !saw_end) {
    std::uint32_t len = detail::get_be32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) fail("png: truncated chunk in " + path);
    std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
    const std::uint8_t* payload = bytes.data() + pos + 8;
    std::uint32_t want_crc = detail::get_be32(payload + len);
    std::uint32_t got_crc = static_cast<std::uint32_t>(
        crc32(0L, bytes.data() + pos + 4, static_cast<uInt>(len + 4)));
    if (want_crc != got_crc) fail("png: bad chunk checksum in " + path);

    if (type == "IHDR") {
      if (len != 13) fail("png: bad IHDR in " + path);
      img.width = static_cast<int>(detail::get_be32(payload));
      img.height = static_cast<int>(detail::get_be32(payload + 4));
      bit_depth = payload[8];
      img.color_type = payload[9];
      if (bit_depth != 8) fail("png: only 8-bit images are supported: " + path);
      if (img.color_type != 0 && img.color_type != 2 && img.color_type != 3)
        fail("png: unsupported color type " + std::to_string(img.color_type) + " in " + path);
      if (payload[10] != 0 || payload[11] != 0 || payload[12] != 0)
        fail("png: unsupported compression/filter/interlace mode in " + path);
    } else if (type == "PLTE") {
      if (len % 3 != 0) fail("png: bad palette in " + path);
      for (std::uint32_t i = 0; i < len; i += 3)
        img.palette.push_back({payload[i], payload[i + 1], payload[i + 2]});
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      saw_end = true;
    }
    pos += 12 + len;
  }
  if (!saw_end) fail("png: missing IEND in " + path);
  if (img.width <= 0 || img.height <= 0) fail("png: missing IHDR in " + path);
  if (img.color_type == 3 && img.palette.empty()) fail("png: paletted image without PLTE: " + path);

  int bpp = img.channels();
  std::size_t row_bytes = static_cast<std::size_t>(img.width) * bpp;
  uLongf raw_len = static_cast<uLongf>(img.height * (row_bytes + 1));
  std::vector<std::uint8_t> raw(raw_len);
  int rc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
  if (rc != Z_OK || raw_len != static_cast<uLongf>(img.height * (row_bytes + 1)))
    fail("png: corrupt image data in " + path);

  img.data.assign(static_cast<std::size_t>(img.height) * row_bytes, 0);
  std::vector<std::uint8_t> prev(row_bytes, 0);
  for (int y = 0; y < img.height; ++y) {
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (row_bytes + 1);
    std::uint8_t filter = src[0];
    std::uint8_t* dst = img.data.data() + static_cast<std::size_t>(y) * row_bytes;
    for (std::size_t x = 0; x < row_bytes; ++x) {
      int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
      int b = prev[x];
      int c = x >= static_cast<std::size_t>(bpp) ? prev[x - bpp] : 0;
      int v = src[1 + x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: fail("png: unknown filter type in " + path);
      }
      dst[x] = static_cast<std::uint8_t>(v & 0xff);
    }
    std::memcpy(prev.data(), dst, row_bytes);
  }
  if (img.color_type == 3)
    for (std::uint8_t v : img.data)
      if (v >= img.palette.size()) fail("png: palette index out of range in " + path);
  return img;
}

}  // namespace hrda::png
