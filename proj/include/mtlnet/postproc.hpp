#pragma once

// Raw network outputs to detections and label maps.

#include "mtlnet/box.hpp"
#include "mtlnet/image.hpp"
#include "mtlnet/model.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mtlnet {

struct Detection {
  int class_idx = 0;
  double score = 0;  // objectness * class probability
  Box box;           // pixels, clipped to the image
  bool operator==(const Detection&) const = default;
};

// Pre-NMS detections for every (cell, anchor) of every image:
//   bx = (s(tx) + col) / Wg, by = (s(ty) + row) / Hg,
//   bw = pw * exp(tw) / Wg, bh = ph * exp(th) / Hg,
// scaled to pixels, converted to corners and clipped. Boxes that clip to
// zero area are dropped.
template <typename Scalar>
std::vector<std::vector<Detection>> decode_boxes(const Tensor<Scalar>& raw,
                                                 const std::vector<Anchor>& anchors,
                                                 Index num_classes, Index image_h, Index image_w);

// Zero for disjoint or degenerate boxes.
double box_iou(const Box& a, const Box& b);

// Drops detections under score_thresh, then per class keeps the best
// remaining detection and suppresses same-class boxes with IoU > iou_thresh.
// Order: score desc, then x1 asc, then y1 asc.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, double score_thresh);

bool detection_before(const Detection& a, const Detection& b);

// Rows above the horizon carry this marker when the restriction is active.
inline constexpr std::uint8_t kUnevaluated = 255;

struct SegMask {
  Index width = 0, height = 0;
  std::vector<std::uint8_t> labels;
  std::optional<Index> horizon_row;
  Index processed_pixels = 0;

  std::uint8_t at(Index x, Index y) const { return labels[y * width + x]; }
  GrayImage to_image() const {
    GrayImage g(width, height);
    g.pixels = labels;
    return g;
  }
};

// Per-pixel argmax over classes (ties -> lowest index) for each image of
// [N,C,H,W] logits. Rows < horizon_row are marked kUnevaluated and skipped.
template <typename Scalar>
std::vector<SegMask> seg_argmax(const Tensor<Scalar>& logits, std::optional<Index> horizon_row = {});

// One JSON object per line: {image_id, class, score, box:[x1,y1,x2,y2]}.
void write_detections_jsonl(std::ostream& os, const std::string& image_id,
                            const std::vector<Detection>& dets,
                            const std::vector<std::string>& class_names);
struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};
std::vector<ImageDetections> read_detections_jsonl(std::istream& is,
                                                   const std::vector<std::string>& class_names);

// Image with a translucent segmentation tint (road green, sidewalk pink) and
// class-coloured box outlines.
RgbImage render_overlay(const RgbImage& image, const SegMask* mask,
                        const std::vector<Detection>& dets,
                        const std::vector<std::string>& seg_classes);

}  // namespace mtlnet
