#include "mtlnet/loss.hpp"

#include <algorithm>
#include <cmath>

namespace mtlnet {

void LossWeights::validate() const {
  if (!(seg >= 0 && det >= 0)) throw std::invalid_argument("loss weights must be non-negative");
  if (seg == 0 && det == 0) throw std::invalid_argument("loss weights cannot both be zero");
}

namespace {

// Neumaier summation; the loss is a mean over many pixels.
struct CompensatedSum {
  double sum = 0, carry = 0;
  void add(double v) {
    const double t = sum + v;
    carry += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  double value() const { return sum + carry; }
};

}  // namespace

template <typename Scalar>
Tensor<Scalar> seg_loss(const Tensor<Scalar>& logits, std::span<const std::uint8_t> labels,
                        std::span<const std::uint8_t> valid_mask) {
  if (logits.ndim() != 4) throw ShapeError("seg_loss expects [N,C,H,W] logits");
  const Index n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (static_cast<Index>(labels.size()) != n * hw) throw ShapeError("seg_loss label count mismatch");
  if (!valid_mask.empty() && valid_mask.size() != labels.size()) {
    throw ShapeError("seg_loss valid mask size mismatch");
  }

  const Scalar* z = logits.ptr();
  // Per-pixel softmax is kept for the backward pass.
  Buffer<Scalar> prob(logits.numel());
  CompensatedSum total;
  Index count = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index p = 0; p < hw; ++p) {
      const Index pix = i * hw + p;
      const std::uint8_t label = labels[pix];
      const bool valid = label != kIgnoreLabel && (valid_mask.empty() || valid_mask[pix] != 0);
      if (label != kIgnoreLabel && label >= c) {
        throw std::invalid_argument("seg_loss label " + std::to_string(label) + " out of range");
      }
      Scalar top = z[(i * c) * hw + p];
      for (Index k = 1; k < c; ++k) top = std::max(top, z[(i * c + k) * hw + p]);
      double denom = 0;
      for (Index k = 0; k < c; ++k) denom += std::exp(double(z[(i * c + k) * hw + p] - top));
      for (Index k = 0; k < c; ++k) {
        prob[(i * c + k) * hw + p] = static_cast<Scalar>(std::exp(double(z[(i * c + k) * hw + p] - top)) / denom);
      }
      if (!valid) continue;
      total.add(std::log(denom) - double(z[(i * c + label) * hw + p] - top));
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("seg_loss: every pixel is masked out");

  std::vector<std::uint8_t> keep(labels.size());
  for (std::size_t pix = 0; pix < labels.size(); ++pix) {
    keep[pix] = labels[pix] != kIgnoreLabel && (valid_mask.empty() || valid_mask[pix] != 0);
  }
  std::vector<std::uint8_t> label_copy(labels.begin(), labels.end());
  auto backward = [prob = std::move(prob), keep = std::move(keep), label_copy = std::move(label_copy),
                   n, c, hw, count](const Buffer<Scalar>& gout, std::span<Buffer<Scalar>* const> slots) {
    const Scalar g = gout[0] / static_cast<Scalar>(count);
    Buffer<Scalar>& dz = *slots[0];
    for (Index i = 0; i < n; ++i) {
      for (Index p = 0; p < hw; ++p) {
        const Index pix = i * hw + p;
        if (!keep[pix]) continue;
        for (Index k = 0; k < c; ++k) {
          const Index at = (i * c + k) * hw + p;
          dz[at] += g * (prob[at] - (k == label_copy[pix] ? Scalar(1) : Scalar(0)));
        }
      }
    }
  };
  return make_result<Scalar>({1}, Buffer<Scalar>::Constant(1, static_cast<Scalar>(total.value() / count)),
                             "seg_loss", {logits}, std::move(backward));
}

double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  return inter / (w1 * h1 + w2 * h2 - inter);
}

CellAssignment assign_box(const GtBox& box, Index grid_h, Index grid_w,
                          const std::vector<Anchor>& anchors) {
  CellAssignment a;
  a.col = std::clamp<Index>(static_cast<Index>(std::floor(box.cx * grid_w)), 0, grid_w - 1);
  a.row = std::clamp<Index>(static_cast<Index>(std::floor(box.cy * grid_h)), 0, grid_h - 1);
  const double gw = box.w * grid_w, gh = box.h * grid_h;
  double best = -1;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const double iou = shape_iou(gw, gh, anchors[k].w, anchors[k].h);
    if (iou > best) {
      best = iou;
      a.anchor = static_cast<Index>(k);
    }
  }
  return a;
}

DetTargets assign_targets(const std::vector<std::vector<GtBox>>& gt, Index grid_h, Index grid_w,
                          const std::vector<Anchor>& anchors, Index num_classes) {
  DetTargets t;
  t.batch = static_cast<Index>(gt.size());
  t.anchors = static_cast<Index>(anchors.size());
  t.grid_h = grid_h;
  t.grid_w = grid_w;
  t.num_classes = num_classes;
  const Index slots = t.batch * t.anchors * grid_h * grid_w;
  t.coords.assign(slots * 4, 0.0);
  t.classes.assign(slots, 0);
  t.responsible.assign(slots, 0);
  for (Index n = 0; n < t.batch; ++n) {
    for (const GtBox& box : gt[n]) {
      if (!(box.cx >= 0 && box.cx <= 1 && box.cy >= 0 && box.cy <= 1 && box.w > 0 && box.h > 0)) {
        throw std::invalid_argument("assign_targets: box outside the normalized range");
      }
      if (box.class_idx < 0 || box.class_idx >= num_classes) {
        throw std::invalid_argument("assign_targets: class index out of range");
      }
      const CellAssignment a = assign_box(box, grid_h, grid_w, anchors);
      const Index s = t.slot(n, a.anchor, a.row, a.col);
      if (t.responsible[s]) ++t.collisions;
      t.responsible[s] = 1;
      t.classes[s] = box.class_idx;
      t.coords[s * 4 + 0] = box.cx * grid_w - a.col;
      t.coords[s * 4 + 1] = box.cy * grid_h - a.row;
      t.coords[s * 4 + 2] = std::log(box.w * grid_w / anchors[a.anchor].w);
      t.coords[s * 4 + 3] = std::log(box.h * grid_h / anchors[a.anchor].h);
    }
  }
  return t;
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

template <typename Scalar>
Tensor<Scalar> det_loss(const Tensor<Scalar>& raw, const DetTargets& targets,
                        const DetLossConfig& config) {
  const Index n = targets.batch, na = targets.anchors, gh = targets.grid_h, gw = targets.grid_w;
  const Index nc = targets.num_classes, fields = 5 + nc, cells = gh * gw;
  if (raw.shape() != Shape{n, na * fields, gh, gw}) {
    throw ShapeError("det_loss raw output " + shape_str(raw.shape()) + " does not match targets");
  }
  const Scalar* r = raw.ptr();
  auto at = [&](Index i, Index a, Index f, Index cell) { return ((i * na + a) * fields + f) * cells + cell; };

  double total = 0;
  Buffer<Scalar> grad = Buffer<Scalar>::Zero(raw.numel());
  std::vector<double> prob(nc);
  for (Index i = 0; i < n; ++i) {
    for (Index a = 0; a < na; ++a) {
      for (Index cell = 0; cell < cells; ++cell) {
        const Index s = targets.slot(i, a, cell / gw, cell % gw);
        const double so = stable_sigmoid(r[at(i, a, 4, cell)]);
        if (!targets.responsible[s]) {
          total += config.lambda_noobj * so * so;
          grad[at(i, a, 4, cell)] = static_cast<Scalar>(config.lambda_noobj * 2 * so * so * (1 - so));
          continue;
        }
        for (int f = 0; f < 2; ++f) {
          const double sv = stable_sigmoid(r[at(i, a, f, cell)]);
          const double d = sv - targets.coords[s * 4 + f];
          total += config.lambda_coord * d * d;
          grad[at(i, a, f, cell)] = static_cast<Scalar>(config.lambda_coord * 2 * d * sv * (1 - sv));
        }
        for (int f = 2; f < 4; ++f) {
          const double d = r[at(i, a, f, cell)] - targets.coords[s * 4 + f];
          total += config.lambda_coord * d * d;
          grad[at(i, a, f, cell)] = static_cast<Scalar>(config.lambda_coord * 2 * d);
        }
        total += (so - 1) * (so - 1);
        grad[at(i, a, 4, cell)] = static_cast<Scalar>(2 * (so - 1) * so * (1 - so));

        double top = r[at(i, a, 5, cell)];
        for (Index k = 1; k < nc; ++k) top = std::max<double>(top, r[at(i, a, 5 + k, cell)]);
        double denom = 0;
        for (Index k = 0; k < nc; ++k) denom += prob[k] = std::exp(r[at(i, a, 5 + k, cell)] - top);
        double dot = 0;  // sum_c (p_c - y_c) p_c
        for (Index k = 0; k < nc; ++k) {
          prob[k] /= denom;
          const double d = prob[k] - (k == targets.classes[s] ? 1.0 : 0.0);
          total += d * d;
          dot += d * prob[k];
        }
        for (Index k = 0; k < nc; ++k) {
          const double d = prob[k] - (k == targets.classes[s] ? 1.0 : 0.0);
          grad[at(i, a, 5 + k, cell)] = static_cast<Scalar>(2 * prob[k] * (d - dot));
        }
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  grad *= static_cast<Scalar>(inv_n);
  auto backward = [grad = std::move(grad)](const Buffer<Scalar>& gout,
                                           std::span<Buffer<Scalar>* const> slots) {
    *slots[0] += gout[0] * grad;
  };
  return make_result<Scalar>({1}, Buffer<Scalar>::Constant(1, static_cast<Scalar>(total * inv_n)),
                             "det_loss", {raw}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> mtl_loss(const Tensor<Scalar>& seg, const Tensor<Scalar>& det, const LossWeights& w) {
  w.validate();
  if (!seg.defined() && !det.defined()) throw std::invalid_argument("mtl_loss needs at least one task loss");
  if (!seg.defined()) return scale(det, w.det);
  if (!det.defined()) return scale(seg, w.seg);
  if (seg.numel() != 1 || det.numel() != 1) throw ShapeError("mtl_loss expects scalar task losses");
  return add(scale(seg, w.seg), scale(det, w.det));
}

#define MTLNET_INSTANTIATE_LOSS(S)                                                               \
  template Tensor<S> seg_loss(const Tensor<S>&, std::span<const std::uint8_t>,                   \
                              std::span<const std::uint8_t>);                                    \
  template Tensor<S> det_loss(const Tensor<S>&, const DetTargets&, const DetLossConfig&);        \
  template Tensor<S> mtl_loss(const Tensor<S>&, const Tensor<S>&, const LossWeights&);

MTLNET_INSTANTIATE_LOSS(float)
MTLNET_INSTANTIATE_LOSS(double)

}  // namespace mtlnet
