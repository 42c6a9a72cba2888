#pragma once

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mvsds/core/common.hpp"
#include "mvsds/core/json_util.hpp"

namespace mvsds {

// 8-bit RGBA image, row-major.
struct ImageRGBA {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // width*height*4

  ImageRGBA() = default;
  ImageRGBA(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 4, 0) {}

  uint8_t* at(int x, int y) { return pixels.data() + (static_cast<size_t>(y) * width + x) * 4; }
  const uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<size_t>(y) * width + x) * 4;
  }
};

namespace detail {

inline void put_u32_be(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

inline uint32_t get_u32_be(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
         uint32_t(p[3]);
}

inline void append_chunk(std::string& out, const char type[4],
                         const std::string& payload) {
  put_u32_be(out, static_cast<uint32_t>(payload.size()));
  size_t crc_start = out.size();
  out.append(type, 4);
  out.append(payload);
  uint32_t crc = crc32(0, reinterpret_cast<const Bytef*>(out.data() + crc_start),
                       static_cast<uInt>(out.size() - crc_start));
  put_u32_be(out, crc);
}

inline std::string zlib_deflate(const std::string& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string out(bound, '\0');
  int rc = compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                     reinterpret_cast<const Bytef*>(raw.data()),
                     static_cast<uLong>(raw.size()), 6);
  MVSDS_CHECK(rc == Z_OK, "zlib deflate failed: ", rc);
  out.resize(bound);
  return out;
}

inline std::string zlib_inflate(const uint8_t* data, size_t size,
                                size_t expected) {
  std::string out(expected, '\0');
  uLongf out_size = static_cast<uLongf>(expected);
  int rc = uncompress(reinterpret_cast<Bytef*>(out.data()), &out_size, data,
                      static_cast<uLong>(size));
  MVSDS_CHECK(rc == Z_OK && out_size == expected, "zlib inflate failed: ", rc);
  return out;
}

inline uint8_t paeth(uint8_t a, uint8_t b, uint8_t c) {
  int p = int(a) + int(b) - int(c);
  int pa = std::abs(p - int(a)), pb = std::abs(p - int(b)), pc = std::abs(p - int(c));
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace detail

// Minimal deterministic PNG encoder: 8-bit RGBA, no interlace, filter 0 on
// every scanline, fixed zlib level. Identical pixels give identical bytes.
inline std::string encode_png(const ImageRGBA& img) {
  MVSDS_REQUIRE(img.width > 0 && img.height > 0, "encode_png: empty image");
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_u32_be(ihdr, static_cast<uint32_t>(img.width));
  detail::put_u32_be(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(6);   // color type RGBA
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  detail::append_chunk(out, "IHDR", ihdr);

  const size_t stride = static_cast<size_t>(img.width) * 4;
  std::string raw;
  raw.reserve((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back('\0');  // filter type None
    raw.append(reinterpret_cast<const char*>(img.pixels.data() + y * stride), stride);
  }
  detail::append_chunk(out, "IDAT", detail::zlib_deflate(raw));
  detail::append_chunk(out, "IEND", "");
  return out;
}

// Decoder for the subset this project writes (plus standard scanline
// filters): 8-bit RGBA, single IDAT stream, no interlace.
inline ImageRGBA decode_png(const std::string& bytes) {
  MVSDS_REQUIRE(bytes.size() > 8 && std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0,
                "decode_png: not a PNG");
  const uint8_t* p = reinterpret_cast<const uint8_t*>(bytes.data()) + 8;
  const uint8_t* end = reinterpret_cast<const uint8_t*>(bytes.data()) + bytes.size();
  int width = 0, height = 0;
  std::string idat;
  while (p + 12 <= end) {
    uint32_t len = detail::get_u32_be(p);
    std::string type(reinterpret_cast<const char*>(p + 4), 4);
    const uint8_t* payload = p + 8;
    MVSDS_REQUIRE(payload + len + 4 <= end, "decode_png: truncated chunk");
    if (type == "IHDR") {
      width = static_cast<int>(detail::get_u32_be(payload));
      height = static_cast<int>(detail::get_u32_be(payload + 4));
      MVSDS_REQUIRE(payload[8] == 8 && payload[9] == 6 && payload[12] == 0,
                    "decode_png: only 8-bit RGBA non-interlaced supported");
    } else if (type == "IDAT") {
      idat.append(reinterpret_cast<const char*>(payload), len);
    } else if (type == "IEND") {
      break;
    }
    p = payload + len + 4;
  }
  MVSDS_REQUIRE(width > 0 && height > 0 && !idat.empty(), "decode_png: missing data");
  const size_t stride = static_cast<size_t>(width) * 4;
  std::string raw = detail::zlib_inflate(
      reinterpret_cast<const uint8_t*>(idat.data()), idat.size(),
      (stride + 1) * height);
  ImageRGBA img(width, height);
  std::vector<uint8_t> prev(stride, 0);
  for (int y = 0; y < height; ++y) {
    const uint8_t* row = reinterpret_cast<const uint8_t*>(raw.data()) + y * (stride + 1);
    uint8_t filter = row[0];
    uint8_t* dst = img.pixels.data() + y * stride;
    for (size_t i = 0; i < stride; ++i) {
      uint8_t a = i >= 4 ? dst[i - 4] : 0;
      uint8_t b = prev[i];
      uint8_t c = i >= 4 ? prev[i - 4] : 0;
      uint8_t x = row[1 + i];
      switch (filter) {
        case 0: dst[i] = x; break;
        case 1: dst[i] = static_cast<uint8_t>(x + a); break;
        case 2: dst[i] = static_cast<uint8_t>(x + b); break;
        case 3: dst[i] = static_cast<uint8_t>(x + ((int(a) + int(b)) >> 1)); break;
        case 4: dst[i] = static_cast<uint8_t>(x + detail::paeth(a, b, c)); break;
        default: MVSDS_REQUIRE(false, "decode_png: bad filter ", int(filter));
      }
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

inline void save_png(const std::filesystem::path& path, const ImageRGBA& img) {
  write_file_atomic(path, encode_png(img));
}

inline ImageRGBA load_png(const std::filesystem::path& path) {
  return decode_png(read_text_file(path));
}

}  // namespace mvsds
