#pragma once

// Minimal PNG support for the comparison renders: 8-bit RGB, filter 0,
// single zlib stream. Covers exactly what this project writes; the reader
// exists so tests and tools can load those files back.

#include <cstdint>
#include <vector>

#include <zlib.h>

#include "cdnet/common.hpp"
#include "cdnet/raster.hpp"

namespace cdnet {

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;  // row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0) {}

  uint8_t* px(int r, int c) { return pixels.data() + (static_cast<size_t>(r) * width + c) * 3; }
  const uint8_t* px(int r, int c) const {
    return pixels.data() + (static_cast<size_t>(r) * width + c) * 3;
  }
};

namespace detail {

inline void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32_be(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void put_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& data) {
  put_u32_be(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32_be(out, crc);
}

}  // namespace detail

inline std::vector<uint8_t> encode_png(const RgbImage& img) {
  check(img.height > 0 && img.width > 0, ErrKind::runtime, "png: empty image");
  const size_t stride = static_cast<size_t>(img.width) * 3;
  std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(img.height));
  for (int r = 0; r < img.height; ++r) {
    raw[static_cast<size_t>(r) * (stride + 1)] = 0;  // filter: none
    std::copy_n(img.pixels.data() + static_cast<size_t>(r) * stride, stride,
                raw.data() + static_cast<size_t>(r) * (stride + 1) + 1);
  }

  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_size);
  int rc = compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6);
  check(rc == Z_OK, ErrKind::runtime, "png: deflate failed");
  comp.resize(comp_size);

  std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  detail::put_u32_be(ihdr, static_cast<uint32_t>(img.width));
  detail::put_u32_be(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::put_chunk(out, "IHDR", ihdr);
  detail::put_chunk(out, "IDAT", comp);
  detail::put_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const fs::path& path, const RgbImage& img) {
  auto bytes = encode_png(img);
  detail::write_file(path, bytes.data(), bytes.size());
}

// Reads the subset of PNG this project writes (8-bit RGB, filter 0).
inline RgbImage read_png(const fs::path& path) {
  auto file = detail::read_file(path, "missing png");
  const auto* p = reinterpret_cast<const uint8_t*>(file.data());
  check(file.size() > 8 + 25 && p[0] == 137 && p[1] == 'P' && p[2] == 'N' && p[3] == 'G',
        ErrKind::input, "not a png file");

  RgbImage img;
  std::vector<uint8_t> idat;
  size_t off = 8;
  while (off + 12 <= file.size()) {
    uint32_t len = detail::get_u32_be(p + off);
    std::string type(reinterpret_cast<const char*>(p + off + 4), 4);
    const uint8_t* data = p + off + 8;
    check(off + 12 + len <= file.size(), ErrKind::input, "png chunk truncated");
    if (type == "IHDR") {
      img.width = static_cast<int>(detail::get_u32_be(data));
      img.height = static_cast<int>(detail::get_u32_be(data + 4));
      check(data[8] == 8 && data[9] == 2 && data[12] == 0, ErrKind::input,
            "png: unsupported format (expect 8-bit RGB, no interlace)");
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    } else if (type == "IEND") {
      break;
    }
    off += 12 + len;
  }
  check(img.width > 0 && img.height > 0 && !idat.empty(), ErrKind::input, "png: missing chunks");

  const size_t stride = static_cast<size_t>(img.width) * 3;
  std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(img.height));
  uLongf raw_size = static_cast<uLongf>(raw.size());
  int rc = uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size()));
  check(rc == Z_OK && raw_size == raw.size(), ErrKind::input, "png: inflate failed");

  img.pixels.resize(stride * static_cast<size_t>(img.height));
  for (int r = 0; r < img.height; ++r) {
    check(raw[static_cast<size_t>(r) * (stride + 1)] == 0, ErrKind::input,
          "png: unsupported row filter");
    std::copy_n(raw.data() + static_cast<size_t>(r) * (stride + 1) + 1, stride,
                img.pixels.data() + static_cast<size_t>(r) * stride);
  }
  return img;
}

}  // namespace cdnet
