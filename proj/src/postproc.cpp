#include "mtlnet/postproc.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

namespace mtlnet {

namespace {
double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

template <typename Scalar>
std::vector<std::vector<Detection>> decode_boxes(const Tensor<Scalar>& raw,
                                                 const std::vector<Anchor>& anchors,
                                                 Index num_classes, Index image_h, Index image_w) {
  const Index na = static_cast<Index>(anchors.size()), fields = 5 + num_classes;
  if (raw.ndim() != 4 || raw.dim(1) != na * fields) {
    throw ShapeError("decode_boxes: raw output " + shape_str(raw.shape()) + " does not match " +
                     std::to_string(na) + " anchors x " + std::to_string(fields) + " fields");
  }
  const Index n = raw.dim(0), gh = raw.dim(2), gw = raw.dim(3), cells = gh * gw;
  const Scalar* r = raw.ptr();
  std::vector<std::vector<Detection>> out(n);
  std::vector<double> prob(num_classes);
  for (Index i = 0; i < n; ++i) {
    for (Index a = 0; a < na; ++a) {
      const Scalar* base = r + (i * na + a) * fields * cells;
      for (Index cell = 0; cell < cells; ++cell) {
        const Index row = cell / gw, col = cell % gw;
        const double bx = (stable_sigmoid(base[0 * cells + cell]) + col) / gw;
        const double by = (stable_sigmoid(base[1 * cells + cell]) + row) / gh;
        const double bw = anchors[a].w * std::exp(double(base[2 * cells + cell])) / gw;
        const double bh = anchors[a].h * std::exp(double(base[3 * cells + cell])) / gh;
        const double objectness = stable_sigmoid(base[4 * cells + cell]);

        double top = base[5 * cells + cell];
        for (Index k = 1; k < num_classes; ++k) top = std::max<double>(top, base[(5 + k) * cells + cell]);
        double denom = 0;
        int best = 0;
        for (Index k = 0; k < num_classes; ++k) {
          denom += prob[k] = std::exp(double(base[(5 + k) * cells + cell]) - top);
          if (prob[k] > prob[best]) best = static_cast<int>(k);
        }
        Detection d;
        d.class_idx = best;
        d.score = objectness * (prob[best] / denom);
        const double W = static_cast<double>(image_w), H = static_cast<double>(image_h);
        d.box = {std::clamp((bx - bw / 2) * W, 0.0, W), std::clamp((by - bh / 2) * H, 0.0, H),
                 std::clamp((bx + bw / 2) * W, 0.0, W), std::clamp((by + bh / 2) * H, 0.0, H)};
        if (d.box.x2 > d.box.x1 && d.box.y2 > d.box.y1) out[i].push_back(d);
      }
    }
  }
  return out;
}

template std::vector<std::vector<Detection>> decode_boxes(const Tensor<float>&, const std::vector<Anchor>&,
                                                          Index, Index, Index);
template std::vector<std::vector<Detection>> decode_boxes(const Tensor<double>&, const std::vector<Anchor>&,
                                                          Index, Index, Index);

double box_iou(const Box& a, const Box& b) {
  const double area_a = a.area(), area_b = b.area();
  if (area_a <= 0 || area_b <= 0) return 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (area_a + area_b - inter);
}

bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  return a.box.y1 < b.box.y1;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, double score_thresh) {
  std::erase_if(dets, [&](const Detection& d) { return d.score < score_thresh; });
  std::stable_sort(dets.begin(), dets.end(), detection_before);
  std::vector<Detection> kept;
  std::vector<bool> suppressed(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (suppressed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (!suppressed[j] && dets[j].class_idx == dets[i].class_idx &&
          box_iou(dets[i].box, dets[j].box) > iou_thresh) {
        suppressed[j] = true;
      }
    }
  }
  return kept;
}

template <typename Scalar>
std::vector<SegMask> seg_argmax(const Tensor<Scalar>& logits, std::optional<Index> horizon_row) {
  if (logits.ndim() != 4) throw ShapeError("seg_argmax expects [N,C,H,W] logits");
  const Index n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (horizon_row && (*horizon_row < 0 || *horizon_row > h)) {
    throw std::out_of_range("horizon row " + std::to_string(*horizon_row) + " outside [0, " +
                            std::to_string(h) + "]");
  }
  const Index first_row = horizon_row.value_or(0);
  const Scalar* z = logits.ptr();
  std::vector<SegMask> masks(n);
  for (Index i = 0; i < n; ++i) {
    SegMask& m = masks[i];
    m.width = w;
    m.height = h;
    m.horizon_row = horizon_row;
    m.labels.assign(static_cast<std::size_t>(h * w), kUnevaluated);
    for (Index p = first_row * w; p < h * w; ++p) {
      Index best = 0;
      for (Index k = 1; k < c; ++k) {
        if (z[(i * c + k) * h * w + p] > z[(i * c + best) * h * w + p]) best = k;
      }
      m.labels[p] = static_cast<std::uint8_t>(best);
      ++m.processed_pixels;
    }
  }
  return masks;
}

template std::vector<SegMask> seg_argmax(const Tensor<float>&, std::optional<Index>);
template std::vector<SegMask> seg_argmax(const Tensor<double>&, std::optional<Index>);

void write_detections_jsonl(std::ostream& os, const std::string& image_id,
                            const std::vector<Detection>& dets,
                            const std::vector<std::string>& class_names) {
  for (const auto& d : dets) {
    nlohmann::json j{{"image_id", image_id},
                     {"class", class_names.at(d.class_idx)},
                     {"score", d.score},
                     {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}};
    os << j.dump() << '\n';
  }
}

std::vector<ImageDetections> read_detections_jsonl(std::istream& is,
                                                   const std::vector<std::string>& class_names) {
  std::vector<ImageDetections> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const std::string id = j.at("image_id").get<std::string>();
    const std::string name = j.at("class").get<std::string>();
    const auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) throw std::invalid_argument("unknown detection class " + name);
    const auto& b = j.at("box");
    Detection d{static_cast<int>(it - class_names.begin()), j.at("score").get<double>(),
                {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()}};
    if (out.empty() || out.back().image_id != id) out.push_back({id, {}});
    out.back().detections.push_back(d);
  }
  return out;
}

namespace {
struct Rgb {
  std::uint8_t r, g, b;
};

Rgb seg_colour(const std::string& name) {
  if (name == "road") return {0, 200, 0};
  if (name == "sidewalk" || name == "curb") return {255, 105, 180};
  if (name == "lane") return {255, 255, 255};
  return {0, 0, 0};
}

constexpr Rgb kBoxColours[] = {{255, 40, 40}, {40, 120, 255}, {255, 220, 0}, {0, 255, 255}, {200, 0, 255}};
}  // namespace

RgbImage render_overlay(const RgbImage& image, const SegMask* mask,
                        const std::vector<Detection>& dets,
                        const std::vector<std::string>& seg_classes) {
  RgbImage out = image;
  if (mask) {
    if (mask->width != image.width || mask->height != image.height) {
      throw std::invalid_argument("overlay mask size does not match image");
    }
    for (Index y = 0; y < image.height; ++y) {
      for (Index x = 0; x < image.width; ++x) {
        const std::uint8_t label = mask->at(x, y);
        if (label == kUnevaluated || label == 0 || label >= seg_classes.size()) continue;
        const Rgb c = seg_colour(seg_classes[label]);
        out.at(x, y, 0) = static_cast<std::uint8_t>((out.at(x, y, 0) + c.r) / 2);
        out.at(x, y, 1) = static_cast<std::uint8_t>((out.at(x, y, 1) + c.g) / 2);
        out.at(x, y, 2) = static_cast<std::uint8_t>((out.at(x, y, 2) + c.b) / 2);
      }
    }
  }
  for (const auto& d : dets) {
    const Rgb c = kBoxColours[d.class_idx % std::size(kBoxColours)];
    const Index x1 = std::clamp<Index>(std::lround(d.box.x1), 0, image.width - 1);
    const Index x2 = std::clamp<Index>(std::lround(d.box.x2) - 1, 0, image.width - 1);
    const Index y1 = std::clamp<Index>(std::lround(d.box.y1), 0, image.height - 1);
    const Index y2 = std::clamp<Index>(std::lround(d.box.y2) - 1, 0, image.height - 1);
    auto paint = [&](Index x, Index y) {
      out.at(x, y, 0) = c.r;
      out.at(x, y, 1) = c.g;
      out.at(x, y, 2) = c.b;
    };
    for (Index x = x1; x <= x2; ++x) {
      paint(x, y1);
      paint(x, y2);
    }
    for (Index y = y1; y <= y2; ++y) {
      paint(x1, y);
      paint(x2, y);
    }
  }
  return out;
}

}  // namespace mtlnet
