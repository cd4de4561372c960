#pragma once

// 8-bit raster images and the binary PNM codecs (P6 colour, P5 grey,
// maxval 255) used for datasets, label maps and rendered overlays.

#include "mtlnet/box.hpp"
#include "mtlnet/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace mtlnet {

// Label-map value excluded from losses and metrics.
inline constexpr std::uint8_t kIgnoreLabel = 255;

struct RgbImage {
  Index width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved RGB

  RgbImage() = default;
  RgbImage(Index w, Index h) : width(w), height(h), pixels(static_cast<std::size_t>(w * h * 3), 0) {}
  std::uint8_t& at(Index x, Index y, int c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(Index x, Index y, int c) const { return pixels[(y * width + x) * 3 + c]; }
  bool operator==(const RgbImage&) const = default;
};

struct GrayImage {
  Index width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(Index w, Index h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w * h), fill) {}
  std::uint8_t& at(Index x, Index y) { return pixels[y * width + x]; }
  std::uint8_t at(Index x, Index y) const { return pixels[y * width + x]; }
  bool operator==(const GrayImage&) const = default;
};

class PnmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RgbImage read_ppm(std::istream& is);
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(std::ostream& os, const RgbImage& image);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

GrayImage read_pgm(std::istream& is);
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(std::ostream& os, const GrayImage& image);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

// [3,H,W] with values v / 255.
template <typename Scalar>
Tensor<Scalar> image_to_tensor(const RgbImage& image);

// Bilinear, corner-aligned: output pixel i samples input i * (in - 1) / (out - 1).
RgbImage resize_bilinear(const RgbImage& image, Index out_h, Index out_w);
// Nearest neighbour on the same corner-aligned grid (label maps).
GrayImage resize_nearest(const GrayImage& labels, Index out_h, Index out_w);
// Linear scaling of pixel coordinates between image sizes.
Box rescale_box(const Box& box, Index from_w, Index from_h, Index to_w, Index to_h);

}  // namespace mtlnet
