#pragma once

#include <string>

namespace mtlnet {

// Ground-truth box with normalized center/size coordinates in [0, 1].
struct GtBox {
  int class_idx = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
  bool operator==(const GtBox&) const = default;
};

// Corner box in pixels, x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool operator==(const Box&) const = default;
};

inline Box to_pixel_box(const GtBox& b, double image_w, double image_h) {
  return {(b.cx - b.w / 2) * image_w, (b.cy - b.h / 2) * image_h, (b.cx + b.w / 2) * image_w,
          (b.cy + b.h / 2) * image_h};
}

inline GtBox to_normalized(int class_idx, const Box& b, double image_w, double image_h) {
  return {class_idx, (b.x1 + b.x2) / 2 / image_w, (b.y1 + b.y2) / 2 / image_h,
          (b.x2 - b.x1) / image_w, (b.y2 - b.y1) / image_h};
}

}  // namespace mtlnet

namespace mtlnet {

// Ground-truth object in pixel coordinates, as used for evaluation.
struct LabeledBox {
  int class_idx = 0;
  Box box;
  bool operator==(const LabeledBox&) const = default;
};

}  // namespace mtlnet
