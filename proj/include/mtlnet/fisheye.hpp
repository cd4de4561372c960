#pragma once

// Radially symmetric polynomial lens model in normalized image coordinates
// (pixel offset from the principal point divided by the focal length):
//
//   r_d = r_u * (1 + k1 r_u^2 + k2 r_u^4 + k3 r_u^6 + k4 r_u^8)

#include "mtlnet/image.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace mtlnet {

class DistortionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DistortionModel {
 public:
  struct Params {
    std::array<double, 4> k{0, 0, 0, 0};
    Eigen::Vector2d center{0, 0};  // principal point, pixels
    double focal = 1.0;            // pixels
    double max_valid_radius = 1.0;  // normalized units
  };

  // Throws std::invalid_argument when r_d(r_u) is not strictly increasing on
  // [0, max_valid_radius] (checked on a dense grid of the derivative).
  explicit DistortionModel(const Params& p);

  const Params& params() const { return p_; }

  double distort_radius(double r_u) const;
  double radius_derivative(double r_u) const;
  // Damped Newton from r_u = r_d; throws DistortionError if it fails to reach
  // |residual| <= 1e-10 within 50 iterations.
  double undistort_radius(double r_d) const;
  double max_distorted_radius() const { return distort_radius(p_.max_valid_radius); }

  Eigen::Vector2d distort(const Eigen::Vector2d& p_u) const;
  Eigen::Vector2d undistort(const Eigen::Vector2d& p_d) const;

  Eigen::Vector2d to_normalized(const Eigen::Vector2d& pixel) const {
    return (pixel - p_.center) / p_.focal;
  }
  Eigen::Vector2d to_pixel(const Eigen::Vector2d& normalized) const {
    return normalized * p_.focal + p_.center;
  }

 private:
  Params p_;
};

void to_json(nlohmann::json& j, const DistortionModel& m);
DistortionModel distortion_from_json(const nlohmann::json& j);
DistortionModel load_distortion_model(const std::filesystem::path& path);

// Source coordinates in the distorted image for every pixel of the rectified
// output. The output camera shares the model's principal point and focal.
struct RectifyMap {
  Index width = 0, height = 0;
  std::vector<double> src_x, src_y;
  std::vector<std::uint8_t> valid;

  Index valid_count() const;
  // Bilinear sampling; invalid pixels are black.
  RgbImage apply(const RgbImage& distorted) const;
  // Nearest-neighbour sampling for label maps; invalid pixels get `fill`.
  GrayImage apply_nearest(const GrayImage& distorted, std::uint8_t fill = kIgnoreLabel) const;
};

// A pixel is valid when its ray lies within max_valid_radius and its source
// falls inside [0, src_w - 1] x [0, src_h - 1].
RectifyMap build_rectify_map(const DistortionModel& model, Index src_w, Index src_h, Index out_w,
                             Index out_h);

}  // namespace mtlnet
