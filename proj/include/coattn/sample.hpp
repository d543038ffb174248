#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coattn/labels.hpp"
#include "coattn/tensor.hpp"

namespace coattn {

inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kIgnore = 255;

/// Per-pixel class ids: 0 background, 1..K classes, 255 ignore.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = kBackground) : height(h), width(w), pixels(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

/// One image with its image-level labels, optional pixel ground truth and domain tag.
struct ImageSample {
  std::string id;
  Tensor pixels;  ///< 3×H×W, values in [0, 1]
  LabelVector labels;
  bool has_mask = false;
  Mask mask;
  std::string domain = "target";

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

/// Labels implied by a mask: every class id other than background and ignore.
inline LabelVector labels_from_mask(const Mask& mask, std::size_t num_classes) {
  LabelVector out(num_classes);
  for (auto v : mask.pixels) {
    if (v == kBackground || v == kIgnore) continue;
    if (v > num_classes) throw ContractError("mask value " + std::to_string(v) + " exceeds class count");
    out.set(v - 1u);
  }
  return out;
}

}  // namespace coattn
