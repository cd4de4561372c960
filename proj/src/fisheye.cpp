#include "mtlnet/fisheye.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace mtlnet {

namespace {
constexpr int kMonotonicitySamples = 4096;
constexpr int kMaxNewtonIters = 50;
constexpr double kNewtonTol = 1e-10;
}  // namespace

DistortionModel::DistortionModel(const Params& p) : p_(p) {
  if (!(p_.focal > 0)) throw std::invalid_argument("focal length must be positive");
  if (!(p_.max_valid_radius > 0)) throw std::invalid_argument("max_valid_radius must be positive");
  for (double k : p_.k) {
    if (!std::isfinite(k)) throw std::invalid_argument("distortion coefficients must be finite");
  }
  double prev = 0;
  for (int i = 0; i <= kMonotonicitySamples; ++i) {
    const double r = p_.max_valid_radius * i / kMonotonicitySamples;
    const double rd = distort_radius(r);
    if (radius_derivative(r) <= 0 || (i > 0 && rd <= prev)) {
      throw std::invalid_argument("distortion is not strictly increasing up to r_u = " + std::to_string(r));
    }
    prev = rd;
  }
}

double DistortionModel::distort_radius(double r) const {
  const double r2 = r * r;
  const auto& k = p_.k;
  return r * (1 + r2 * (k[0] + r2 * (k[1] + r2 * (k[2] + r2 * k[3]))));
}

double DistortionModel::radius_derivative(double r) const {
  const double r2 = r * r;
  const auto& k = p_.k;
  return 1 + r2 * (3 * k[0] + r2 * (5 * k[1] + r2 * (7 * k[2] + r2 * 9 * k[3])));
}

double DistortionModel::undistort_radius(double r_d) const {
  if (r_d < 0) throw std::invalid_argument("negative radius");
  if (r_d > max_distorted_radius() * (1 + 1e-12)) {
    throw DistortionError("distorted radius " + std::to_string(r_d) + " is outside the valid domain");
  }
  double r = std::min(r_d, p_.max_valid_radius);
  double residual = distort_radius(r) - r_d;
  for (int it = 0; it < kMaxNewtonIters; ++it) {
    if (std::abs(residual) <= kNewtonTol) return r;
    const double step = residual / radius_derivative(r);
    double damping = 1.0;
    double next = r, next_residual = residual;
    for (int halvings = 0; halvings < 30; ++halvings) {
      next = std::clamp(r - damping * step, 0.0, p_.max_valid_radius);
      next_residual = distort_radius(next) - r_d;
      if (std::abs(next_residual) < std::abs(residual)) break;
      damping *= 0.5;
    }
    if (next == r) break;
    r = next;
    residual = next_residual;
  }
  if (std::abs(residual) <= kNewtonTol) return r;
  throw DistortionError("undistort did not converge for r_d = " + std::to_string(r_d) +
                        " (residual " + std::to_string(residual) + ")");
}

Eigen::Vector2d DistortionModel::distort(const Eigen::Vector2d& p_u) const {
  const double r = p_u.norm();
  if (r > p_.max_valid_radius) {
    throw DistortionError("radius " + std::to_string(r) + " is beyond max_valid_radius");
  }
  if (r == 0) return p_u;
  return p_u * (distort_radius(r) / r);
}

Eigen::Vector2d DistortionModel::undistort(const Eigen::Vector2d& p_d) const {
  const double r_d = p_d.norm();
  if (r_d == 0) return p_d;
  return p_d * (undistort_radius(r_d) / r_d);
}

void to_json(nlohmann::json& j, const DistortionModel& m) {
  const auto& p = m.params();
  j = {{"k", p.k},
       {"center", {p.center.x(), p.center.y()}},
       {"focal", p.focal},
       {"max_valid_radius", p.max_valid_radius}};
}

DistortionModel distortion_from_json(const nlohmann::json& j) {
  DistortionModel::Params p;
  const auto k = j.at("k").get<std::vector<double>>();
  if (k.size() > 4) throw std::invalid_argument("at most four distortion coefficients");
  for (std::size_t i = 0; i < k.size(); ++i) p.k[i] = k[i];
  const auto c = j.at("center").get<std::vector<double>>();
  if (c.size() != 2) throw std::invalid_argument("center must be [cx, cy]");
  p.center = {c[0], c[1]};
  p.focal = j.at("focal").get<double>();
  p.max_valid_radius = j.value("max_valid_radius", 1.0);
  return DistortionModel(p);
}

DistortionModel load_distortion_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  // Accept either the bare model or an experiment config carrying one.
  if (j.contains("fisheye")) j = j.at("fisheye");
  return distortion_from_json(j);
}

Index RectifyMap::valid_count() const {
  Index n = 0;
  for (auto v : valid) n += v != 0;
  return n;
}

RectifyMap build_rectify_map(const DistortionModel& model, Index src_w, Index src_h, Index out_w,
                             Index out_h) {
  if (src_w <= 0 || src_h <= 0 || out_w <= 0 || out_h <= 0) {
    throw std::invalid_argument("rectify map sizes must be positive");
  }
  RectifyMap map;
  map.width = out_w;
  map.height = out_h;
  const auto n = static_cast<std::size_t>(out_w * out_h);
  map.src_x.assign(n, 0.0);
  map.src_y.assign(n, 0.0);
  map.valid.assign(n, 0);
  const double max_r = model.params().max_valid_radius;
  auto snap = [](double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-9 ? r : v;
  };
  parallel_for(out_h, [&](Index y) {
    for (Index x = 0; x < out_w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * out_w + x);
      const Eigen::Vector2d ray = model.to_normalized({double(x), double(y)});
      if (ray.norm() > max_r) continue;
      const Eigen::Vector2d src = model.to_pixel(model.distort(ray));
      const double sx = snap(src.x()), sy = snap(src.y());
      if (sx < 0 || sy < 0 || sx > double(src_w - 1) || sy > double(src_h - 1)) continue;
      map.src_x[i] = sx;
      map.src_y[i] = sy;
      map.valid[i] = 1;
    }
  });
  return map;
}

RgbImage RectifyMap::apply(const RgbImage& distorted) const {
  RgbImage out(width, height);
  parallel_for(height, [&](Index y) {
    for (Index x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * width + x);
      if (!valid[i]) continue;
      const Index x0 = static_cast<Index>(std::floor(src_x[i]));
      const Index y0 = static_cast<Index>(std::floor(src_y[i]));
      const Index x1 = std::min(x0 + 1, distorted.width - 1);
      const Index y1 = std::min(y0 + 1, distorted.height - 1);
      const double fx = src_x[i] - double(x0), fy = src_y[i] - double(y0);
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - fx) * distorted.at(x0, y0, c) + fx * distorted.at(x1, y0, c);
        const double bottom = (1 - fx) * distorted.at(x0, y1, c) + fx * distorted.at(x1, y1, c);
        const double v = (1 - fy) * top + fy * bottom;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  });
  return out;
}

GrayImage RectifyMap::apply_nearest(const GrayImage& distorted, std::uint8_t fill) const {
  GrayImage out(width, height, fill);
  parallel_for(height, [&](Index y) {
    for (Index x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * width + x);
      if (!valid[i]) continue;
      const Index sx = std::min<Index>(std::lround(src_x[i]), distorted.width - 1);
      const Index sy = std::min<Index>(std::lround(src_y[i]), distorted.height - 1);
      out.at(x, y) = distorted.at(sx, sy);
    }
  });
  return out;
}

}  // namespace mtlnet
