#include "mtlnet/fisheye.hpp"
#include "mtlnet/rng.hpp"

#include <gtest/gtest.h>

using namespace mtlnet;

namespace {

DistortionModel::Params params(std::array<double, 4> k, double max_r = 1.2) {
  DistortionModel::Params p;
  p.k = k;
  p.center = {63.5, 47.5};
  p.focal = 60;
  p.max_valid_radius = max_r;
  return p;
}

}  // namespace

TEST(Distortion, RadiusExamples) {
  DistortionModel::Params p;
  p.k = {0.1, 0, 0, 0};
  EXPECT_NEAR(DistortionModel(p).distort_radius(1.0), 1.1, 1e-15);
  p.k = {0.1, 0.01, 0, 0};
  EXPECT_NEAR(DistortionModel(p).distort_radius(0.5), 0.5128125, 1e-15);
}

TEST(Distortion, InverseExample) {
  DistortionModel::Params p;
  p.k = {0.1, 0, 0, 0};
  EXPECT_NEAR(DistortionModel(p).undistort_radius(1.1), 1.0, 1e-10);
}

TEST(Distortion, ZeroRadiusIsFixed) {
  const DistortionModel m(params({-0.25, 0.05, 0, 0}));
  EXPECT_EQ(m.distort_radius(0), 0.0);
  EXPECT_EQ(m.undistort_radius(0), 0.0);
}

TEST(Distortion, RoundTrip) {
  const DistortionModel m(params({-0.25, 0.05, 0.0, 0.0}));
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    const double r = rng.uniform(0, 1.2), t = rng.uniform(0, 6.283185307179586);
    const Eigen::Vector2d p{r * std::cos(t), r * std::sin(t)};
    EXPECT_LT((m.undistort(m.distort(p)) - p).norm(), 1e-8);
  }
}

TEST(Distortion, NonMonotonicRejected) {
  EXPECT_THROW(DistortionModel(params({-0.5, 0, 0, 0}, 1.0)), std::invalid_argument);
  EXPECT_NO_THROW(DistortionModel(params({-0.3, 0, 0, 0}, 1.0)));
}

TEST(Distortion, JsonRoundTrip) {
  const DistortionModel m(params({-0.25, 0.05, 0.001, -0.0002}));
  nlohmann::json j;
  to_json(j, m);
  const auto back = distortion_from_json(j);
  EXPECT_EQ(back.params().k, m.params().k);
  EXPECT_EQ(back.params().center, m.params().center);
  EXPECT_EQ(back.params().focal, m.params().focal);
  EXPECT_EQ(back.params().max_valid_radius, m.params().max_valid_radius);
}

TEST(Rectify, ZeroDistortionIsIdentity) {
  DistortionModel::Params p;
  p.center = {16, 8};
  p.focal = 16;
  p.max_valid_radius = 100;
  const auto map = build_rectify_map(DistortionModel(p), 32, 16, 32, 16);
  EXPECT_EQ(map.valid_count(), 32 * 16);
  for (Index y = 0; y < 16; ++y)
    for (Index x = 0; x < 32; ++x) {
      EXPECT_EQ(map.src_x[y * 32 + x], double(x));
      EXPECT_EQ(map.src_y[y * 32 + x], double(y));
    }
  Rng rng(3);
  RgbImage img(32, 16);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  EXPECT_EQ(map.apply(img), img);
  GrayImage labels(32, 16);
  for (auto& v : labels.pixels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
  EXPECT_EQ(map.apply_nearest(labels), labels);
}

TEST(Rectify, ValidAreaShrinksWithDistortion) {
  Index prev = std::numeric_limits<Index>::max();
  for (double k1 : {0.0, 0.05, 0.1, 0.2}) {
    const auto map = build_rectify_map(DistortionModel(params({k1, 0, 0, 0}, 1.5)), 128, 96, 128, 96);
    EXPECT_LE(map.valid_count(), prev) << k1;
    prev = map.valid_count();
  }
  EXPECT_GT(prev, 0);
}

TEST(Rectify, SourcesInsideImage) {
  const auto map = build_rectify_map(DistortionModel(params({-0.25, 0.05, 0, 0})), 128, 96, 160, 120);
  for (std::size_t i = 0; i < map.valid.size(); ++i) {
    if (!map.valid[i]) continue;
    EXPECT_GE(map.src_x[i], 0);
    EXPECT_LE(map.src_x[i], 127);
    EXPECT_GE(map.src_y[i], 0);
    EXPECT_LE(map.src_y[i], 95);
  }
}

TEST(Rectify, RebuildIsBitIdentical) {
  const DistortionModel m(params({-0.25, 0.05, 0, 0}));
  const auto a = build_rectify_map(m, 128, 96, 128, 96);
  const auto b = build_rectify_map(m, 128, 96, 128, 96);
  EXPECT_EQ(a.src_x, b.src_x);
  EXPECT_EQ(a.src_y, b.src_y);
  EXPECT_EQ(a.valid, b.valid);
}

TEST(Rectify, InvalidPixelsAreBlackOrFill) {
  const auto map = build_rectify_map(DistortionModel(params({0.2, 0, 0, 0}, 1.5)), 128, 96, 128, 96);
  RgbImage white(128, 96);
  std::fill(white.pixels.begin(), white.pixels.end(), 255);
  const auto out = map.apply(white);
  const auto labels = map.apply_nearest(GrayImage(128, 96, 1));
  for (std::size_t i = 0; i < map.valid.size(); ++i) {
    EXPECT_EQ(out.pixels[i * 3], map.valid[i] ? 255 : 0);
    EXPECT_EQ(labels.pixels[i], map.valid[i] ? 1 : kIgnoreLabel);
  }
}
