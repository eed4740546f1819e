#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "privpool/tensor.hpp"

namespace privpool {

/// 8-bit RGB image, row-major, interleaved channels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t* at(std::size_t x, std::size_t y) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* at(std::size_t x, std::size_t y) const { return rgb.data() + (y * width + x) * 3; }
  bool operator==(const Image&) const = default;
};

void write_png(const std::string& path, const Image& image);
/// Single-channel 8-bit PNG.
void write_gray_png(const std::string& path, std::size_t width, std::size_t height,
                    const std::vector<std::uint8_t>& pixels);
Image read_png(const std::string& path);

/// Writes images[i] scaled to [0,1] into batch slot i of a [N,H,W,3] tensor.
Tensor images_to_tensor(const std::vector<const Image*>& images);

/// Bilinear resize (pixel-centre aligned, edge-clamped) of the window
/// [x0,x1)×[y0,y1) to out_w×out_h. A full-image window at the original size
/// reproduces the input exactly.
Image crop_resize_bilinear(const Image& src, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1,
                           std::size_t out_w, std::size_t out_h);

}  // namespace privpool
