#pragma once

// Task losses and their weighted multi-task combination
//   L = w_seg * L_seg + w_det * L_det.

#include "mtlnet/box.hpp"
#include "mtlnet/image.hpp"
#include "mtlnet/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mtlnet {

struct LossWeights {
  double seg = 1.0;
  double det = 1.0;
  void validate() const;  // both >= 0, not both zero
};

// Mean over valid pixels of -log softmax(logits)[label]. labels is [N,H,W];
// pixels labelled kIgnoreLabel or with valid_mask == 0 are excluded and get
// exactly zero gradient. Throws when no pixel is valid.
template <typename Scalar>
Tensor<Scalar> seg_loss(const Tensor<Scalar>& logits, std::span<const std::uint8_t> labels,
                        std::span<const std::uint8_t> valid_mask = {});

// Per (image, anchor, row, col) training targets for the detection head.
struct DetTargets {
  Index batch = 0, anchors = 0, grid_h = 0, grid_w = 0, num_classes = 0;
  std::vector<double> coords;             // [N,A,Hg,Wg,4]: tx, ty in [0,1), log-ratio tw, th
  std::vector<int> classes;               // [N,A,Hg,Wg]
  std::vector<std::uint8_t> responsible;  // [N,A,Hg,Wg]
  Index collisions = 0;                   // boxes overwritten by a later box

  Index slot(Index n, Index a, Index row, Index col) const {
    return ((n * anchors + a) * grid_h + row) * grid_w + col;
  }
};

struct CellAssignment {
  Index col = 0, row = 0, anchor = 0;
};

// Intersection over union of two boxes of the given sizes sharing a center.
double shape_iou(double w1, double h1, double w2, double h2);

// Responsible cell (floor of the scaled center) and best anchor by shape IoU
// (ties -> lowest index) for one normalized box.
CellAssignment assign_box(const GtBox& box, Index grid_h, Index grid_w,
                          const std::vector<Anchor>& anchors);

// One responsible (cell, anchor) per box; a later box landing on an occupied
// slot overwrites it and is counted in DetTargets::collisions.
DetTargets assign_targets(const std::vector<std::vector<GtBox>>& gt, Index grid_h, Index grid_w,
                          const std::vector<Anchor>& anchors, Index num_classes);

struct DetLossConfig {
  double lambda_coord = 5.0;
  double lambda_noobj = 0.5;
};

// Sum-squared-error detection loss over raw head output
// [N, A*(5+C), Hg, Wg], divided by the batch size:
//   lambda_coord * sum_resp [(s(tx)-tx*)^2 + (s(ty)-ty*)^2 + (tw-tw*)^2 + (th-th*)^2]
//   + sum_resp (s(to)-1)^2 + lambda_noobj * sum_noresp s(to)^2
//   + sum_resp sum_c (softmax(cls)_c - onehot_c)^2
template <typename Scalar>
Tensor<Scalar> det_loss(const Tensor<Scalar>& raw, const DetTargets& targets,
                        const DetLossConfig& config = {});

// w.seg * seg + w.det * det. An undefined tensor marks a task the model does
// not have; its weight is then ignored.
template <typename Scalar>
Tensor<Scalar> mtl_loss(const Tensor<Scalar>& seg, const Tensor<Scalar>& det, const LossWeights& w);

}  // namespace mtlnet
