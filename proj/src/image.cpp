#include "mtlnet/image.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

namespace mtlnet {

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& is) {
  std::string token;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n' && ch != '\r') {
      }
      if (!token.empty()) break;
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  if (token.empty()) throw PnmError("truncated PNM header");
  return token;
}

Index header_number(std::istream& is, const char* what) {
  const std::string token = header_token(is);
  Index value = 0;
  for (char c : token) {
    if (c < '0' || c > '9') throw PnmError(std::string("malformed PNM ") + what + ": " + token);
    value = value * 10 + (c - '0');
    if (value > (Index{1} << 30)) throw PnmError(std::string("PNM ") + what + " too large");
  }
  return value;
}

// Parses "<magic> W H maxval" plus the single whitespace byte that follows.
std::pair<Index, Index> read_header(std::istream& is, const char* magic) {
  const std::string m = header_token(is);
  if (m != magic) throw PnmError("expected " + std::string(magic) + " image, found '" + m + "'");
  const Index w = header_number(is, "width");
  const Index h = header_number(is, "height");
  const Index maxval = header_number(is, "maxval");
  if (w <= 0 || h <= 0) throw PnmError("PNM dimensions must be positive");
  if (maxval != 255) throw PnmError("unsupported PNM maxval " + std::to_string(maxval));
  return {w, h};
}

void read_payload(std::istream& is, std::vector<std::uint8_t>& out) {
  if (!is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()))) {
    throw PnmError("truncated PNM payload");
  }
}

}  // namespace

RgbImage read_ppm(std::istream& is) {
  const auto [w, h] = read_header(is, "P6");
  RgbImage img(w, h);
  read_payload(is, img.pixels);
  return img;
}

GrayImage read_pgm(std::istream& is) {
  const auto [w, h] = read_header(is, "P5");
  GrayImage img(w, h);
  read_payload(is, img.pixels);
  return img;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PnmError("cannot open " + path.string());
  return read_ppm(is);
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PnmError("cannot open " + path.string());
  return read_pgm(is);
}

void write_ppm(std::ostream& os, const RgbImage& image) {
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw PnmError("failed to write PPM");
}

void write_pgm(std::ostream& os, const GrayImage& image) {
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw PnmError("failed to write PGM");
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PnmError("cannot open " + path.string() + " for writing");
  write_ppm(os, image);
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PnmError("cannot open " + path.string() + " for writing");
  write_pgm(os, image);
}

template <typename Scalar>
Tensor<Scalar> image_to_tensor(const RgbImage& image) {
  const Index plane = image.width * image.height;
  Buffer<Scalar> data(3 * plane);
  for (Index p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) data[c * plane + p] = static_cast<Scalar>(image.pixels[p * 3 + c]) / Scalar(255);
  }
  return Tensor<Scalar>({3, image.height, image.width}, std::move(data));
}

template Tensor<float> image_to_tensor(const RgbImage&);
template Tensor<double> image_to_tensor(const RgbImage&);

namespace {
double source_coord(Index i, Index in, Index out) {
  if (out == 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
}
}  // namespace

RgbImage resize_bilinear(const RgbImage& image, Index out_h, Index out_w) {
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize target must be positive");
  RgbImage out(out_w, out_h);
  for (Index y = 0; y < out_h; ++y) {
    const double sy = source_coord(y, image.height, out_h);
    const Index y0 = std::min<Index>(static_cast<Index>(sy), image.height - 1);
    const Index y1 = std::min<Index>(y0 + 1, image.height - 1);
    const double fy = sy - y0;
    for (Index x = 0; x < out_w; ++x) {
      const double sx = source_coord(x, image.width, out_w);
      const Index x0 = std::min<Index>(static_cast<Index>(sx), image.width - 1);
      const Index x1 = std::min<Index>(x0 + 1, image.width - 1);
      const double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - fx) * image.at(x0, y0, c) + fx * image.at(x1, y0, c);
        const double bottom = (1 - fx) * image.at(x0, y1, c) + fx * image.at(x1, y1, c);
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround((1 - fy) * top + fy * bottom));
      }
    }
  }
  return out;
}

GrayImage resize_nearest(const GrayImage& labels, Index out_h, Index out_w) {
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize target must be positive");
  GrayImage out(out_w, out_h);
  for (Index y = 0; y < out_h; ++y) {
    const Index sy = std::lround(source_coord(y, labels.height, out_h));
    for (Index x = 0; x < out_w; ++x) {
      out.at(x, y) = labels.at(std::lround(source_coord(x, labels.width, out_w)), sy);
    }
  }
  return out;
}

Box rescale_box(const Box& box, Index from_w, Index from_h, Index to_w, Index to_h) {
  const double sx = static_cast<double>(to_w) / static_cast<double>(from_w);
  const double sy = static_cast<double>(to_h) / static_cast<double>(from_h);
  return {box.x1 * sx, box.y1 * sy, box.x2 * sx, box.y2 * sy};
}

}  // namespace mtlnet
