#pragma once

// Independent reference implementations used to check the library: direct
// nested loops, quadratic scans and brute-force enumeration, written for
// clarity rather than speed.

#include "mtlnet/metrics.hpp"
#include "mtlnet/ops.hpp"
#include "mtlnet/postproc.hpp"
#include "mtlnet/rng.hpp"

#include <vector>

namespace oracle {

using mtlnet::Index;
using mtlnet::Shape;

struct Array4 {
  Shape shape;  // N, C, H, W
  std::vector<double> v;
  double& at(Index n, Index c, Index y, Index x) {
    return v[((n * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  double at(Index n, Index c, Index y, Index x) const {
    return v[((n * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
};

template <typename Scalar>
Array4 from_tensor(const mtlnet::Tensor<Scalar>& t) {
  Array4 a{t.shape(), std::vector<double>(t.numel())};
  for (Index i = 0; i < t.numel(); ++i) a.v[i] = static_cast<double>(t.data()[i]);
  return a;
}

// Cross-correlation with zero padding.
Array4 conv2d(const Array4& x, const Array4& w, const std::vector<double>& bias, const mtlnet::ConvSpec& s);

// Scatter every input pixel times the kernel into an uncropped canvas of
// size (H-1)s+k, then crop (k-s)/2 from each side.
Array4 deconv2d(const Array4& x, const Array4& w, Index stride);

// Window max over in-bounds positions.
Array4 maxpool2d(const Array4& x, Index kernel, Index stride, Index padding);

// max |a - b| / (|b| + 1e-12) over all entries.
double max_rel_diff(const Array4& a, const Array4& b);

double box_iou(const mtlnet::Box& a, const mtlnet::Box& b);

// Score threshold, then for each candidate in rank order keep it unless a
// kept detection of its class overlaps it by more than iou_thresh.
std::vector<mtlnet::Detection> nms(const std::vector<mtlnet::Detection>& dets, double iou_thresh,
                                   double score_thresh);

struct IouOracle {
  std::vector<std::optional<double>> per_class;
  std::optional<double> mean;
};
// Per class: |pred = c and gt = c| / |pred = c or gt = c| over pixels where
// gt is not ignored and pred is evaluated.
IouOracle seg_iou(const std::vector<std::vector<std::uint8_t>>& preds,
                  const std::vector<std::vector<std::uint8_t>>& gts, int classes);

// AP = (1 / num_gt) * sum over true positives at rank k of the best
// precision reached at any rank >= k.
std::optional<double> average_precision(int class_idx, const std::vector<std::vector<mtlnet::Detection>>& dets,
                                        const std::vector<std::vector<mtlnet::LabeledBox>>& gts,
                                        double iou_thresh);

// Random helpers.
mtlnet::Box random_box(mtlnet::Rng& rng, double extent, double min_size = 1.0, double max_size = 0.0);
std::vector<mtlnet::Detection> random_detections(mtlnet::Rng& rng, int n, int classes, double extent);

}  // namespace oracle
