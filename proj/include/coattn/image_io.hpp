#pragma once

// Binary PPM (P6) and PGM (P5) with 8-bit samples.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "coattn/errors.hpp"
#include "coattn/sample.hpp"
#include "coattn/tensor.hpp"

namespace coattn {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  ///< interleaved RGB
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open " + path + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ParseError("write failed for " + path);
}

/// Parses "P?" width height maxval and returns the payload offset.
inline std::size_t parse_pnm_header(const std::string& bytes, const char* magic, std::size_t& width,
                                    std::size_t& height, const std::string& path) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
    throw ParseError(path + ": expected " + std::string(magic) + " header");
  }
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw ParseError(path + ": malformed header");
    return std::stol(bytes.substr(start, pos - start));
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w <= 0 || h <= 0) throw ParseError(path + ": nonpositive image size");
  if (maxval <= 0 || maxval > 255) throw ParseError(path + ": only 8-bit images are supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ParseError(path + ": missing whitespace after header");
  }
  width = static_cast<std::size_t>(w);
  height = static_cast<std::size_t>(h);
  return pos + 1;
}

}  // namespace detail

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

inline std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

inline GrayImage read_pgm(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  GrayImage img;
  const std::size_t off = detail::parse_pnm_header(bytes, "P5", img.width, img.height, path);
  const std::size_t n = img.width * img.height;
  if (bytes.size() - off < n) throw ParseError(path + ": truncated pixel data");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.begin() + static_cast<std::ptrdiff_t>(off + n));
  return img;
}

inline RgbImage read_ppm(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  RgbImage img;
  const std::size_t off = detail::parse_pnm_header(bytes, "P6", img.width, img.height, path);
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() - off < n) throw ParseError(path + ": truncated pixel data");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.begin() + static_cast<std::ptrdiff_t>(off + n));
  return img;
}

inline void write_pgm(const std::string& path, const GrayImage& img) { detail::write_file(path, encode_pgm(img)); }
inline void write_ppm(const std::string& path, const RgbImage& img) { detail::write_file(path, encode_ppm(img)); }

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// 3×H×W tensor in [0, 1] → interleaved 8-bit RGB.
inline RgbImage to_rgb(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw DimensionError("to_rgb: expected 3×H×W, got " + shape_string(t.shape()));
  RgbImage img{t.dim(2), t.dim(1), {}};
  img.pixels.resize(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.pixels[(y * img.width + x) * 3 + c] = to_byte(t.at(c, y, x));
  return img;
}

inline Tensor from_rgb(const RgbImage& img) {
  Tensor t({3, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) t.at(c, y, x) = img.pixels[(y * img.width + x) * 3 + c] / 255.0;
  return t;
}

inline GrayImage to_gray(const Mask& m) { return GrayImage{m.width, m.height, m.pixels}; }
inline Mask to_mask(const GrayImage& g) {
  Mask m(g.height, g.width);
  m.pixels = g.pixels;
  return m;
}

/// H×W map in [0, 1] → 8-bit gray.
inline GrayImage map_to_gray(const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("map_to_gray: expected H×W, got " + shape_string(map.shape()));
  GrayImage img{map.dim(1), map.dim(0), {}};
  img.pixels.reserve(map.numel());
  for (double v : map.data()) img.pixels.push_back(to_byte(v));
  return img;
}

}  // namespace coattn
