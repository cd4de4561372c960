#include "mtlnet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace mtlnet {

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix::row_sum(Index gt) const {
  std::int64_t s = 0;
  for (Index p = 0; p < classes_; ++p) s += at(gt, p);
  return s;
}

std::int64_t ConfusionMatrix::col_sum(Index pred) const {
  std::int64_t s = 0;
  for (Index g = 0; g < classes_; ++g) s += at(g, pred);
  return s;
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw std::invalid_argument("confusion matrix class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix& accumulate_confusion(const SegMask& pred, std::span<const std::uint8_t> gt,
                                      ConfusionMatrix& cm) {
  if (gt.size() != pred.labels.size()) throw std::invalid_argument("prediction and label map sizes differ");
  const Index c = cm.classes();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::uint8_t g = gt[i], p = pred.labels[i];
    if (g == kIgnoreLabel || p == kUnevaluated) continue;
    if (g >= c || p >= c) throw std::out_of_range("class index out of range in confusion update");
    ++cm.at(g, p);
  }
  return cm;
}

SegIou seg_iou(const ConfusionMatrix& cm) {
  SegIou out;
  double sum = 0;
  Index defined = 0;
  for (Index c = 0; c < cm.classes(); ++c) {
    const std::int64_t inter = cm.at(c, c);
    const std::int64_t uni = cm.row_sum(c) + cm.col_sum(c) - inter;
    if (uni == 0) {
      out.per_class.push_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    out.per_class.push_back(iou);
    sum += iou;
    ++defined;
  }
  if (defined > 0) out.mean = sum / static_cast<double>(defined);
  return out;
}

PRCurve pr_curve(int class_idx, const std::vector<std::vector<Detection>>& dets,
                 const std::vector<std::vector<LabeledBox>>& gts, double iou_thresh) {
  if (dets.size() != gts.size()) throw std::invalid_argument("detections and ground truth cover different images");
  struct Ranked {
    double score;
    std::size_t image, order;
  };
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t k = 0; k < dets[i].size(); ++k) {
      if (dets[i][k].class_idx == class_idx) ranked.push_back({dets[i][k].score, i, k});
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.order < b.order;
  });

  PRCurve curve;
  std::vector<std::vector<bool>> matched(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) {
    matched[i].assign(gts[i].size(), false);
    for (const auto& g : gts[i]) curve.num_gt += g.class_idx == class_idx;
  }
  Index tp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const auto& d = dets[ranked[r].image][ranked[r].order];
    const auto& image_gts = gts[ranked[r].image];
    double best = -1;
    std::size_t best_at = 0;
    for (std::size_t g = 0; g < image_gts.size(); ++g) {
      if (image_gts[g].class_idx != class_idx || matched[ranked[r].image][g]) continue;
      const double iou = box_iou(d.box, image_gts[g].box);
      if (iou >= iou_thresh && iou > best) {
        best = iou;
        best_at = g;
      }
    }
    const bool hit = best >= 0;
    if (hit) matched[ranked[r].image][best_at] = true;
    tp += hit;
    curve.scores.push_back(ranked[r].score);
    curve.tp.push_back(hit);
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    curve.recall.push_back(curve.num_gt ? static_cast<double>(tp) / static_cast<double>(curve.num_gt) : 0.0);
  }
  return curve;
}

double average_precision(const PRCurve& curve) {
  if (curve.num_gt == 0) return 0.0;
  const std::size_t n = curve.precision.size();
  std::vector<double> envelope(curve.precision);
  for (std::size_t i = n; i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (curve.recall[i] > prev_recall) {
      ap += (curve.recall[i] - prev_recall) * envelope[i];
      prev_recall = curve.recall[i];
    }
  }
  return ap;
}

ApResult det_ap(const std::vector<std::vector<Detection>>& dets,
                const std::vector<std::vector<LabeledBox>>& gts, Index num_classes, double iou_thresh) {
  ApResult out;
  double sum = 0;
  Index defined = 0;
  for (Index c = 0; c < num_classes; ++c) {
    const PRCurve curve = pr_curve(static_cast<int>(c), dets, gts, iou_thresh);
    if (curve.num_gt == 0) {
      out.per_class.push_back(std::nullopt);
      continue;
    }
    const double ap = average_precision(curve);
    out.per_class.push_back(ap);
    sum += ap;
    ++defined;
  }
  if (defined > 0) out.mean = sum / static_cast<double>(defined);
  return out;
}

ResultsTable report_table(const std::map<std::string, ColumnMetrics>& results,
                          const std::vector<std::string>& seg_classes,
                          const std::vector<std::string>& det_classes, const std::string& dataset) {
  for (const auto& [column, metrics] : results) {
    const auto& cols = study_columns();
    if (std::find(cols.begin(), cols.end(), column) == cols.end()) {
      throw std::invalid_argument("unknown results column '" + column + "'");
    }
  }
  ResultsTable table;
  table.columns = study_columns();
  using Cell = TableRow::Cell;

  auto add_group = [&](const std::string& group, const std::string& prefix, const std::string& mean_label,
                       const std::vector<std::string>& classes,
                       auto pick) {
    std::vector<TableRow> rows(classes.size() + 1);
    for (std::size_t k = 0; k < classes.size(); ++k) rows[k] = {group, prefix + " " + classes[k], false, {}};
    rows.back() = {group, mean_label, true, {}};
    for (const auto& column : table.columns) {
      const auto it = results.find(column);
      const std::optional<std::vector<std::optional<double>>>* values =
          it == results.end() ? nullptr : &pick(it->second);
      if (!values || !values->has_value()) {
        for (auto& r : rows) r.cells.push_back({});
        continue;
      }
      if ((*values)->size() != classes.size()) throw std::invalid_argument("metric count does not match classes");
      double sum = 0;
      int defined = 0;
      for (std::size_t k = 0; k < classes.size(); ++k) {
        const auto& v = (**values)[k];
        if (v) {
          rows[k].cells.push_back({Cell::Kind::value, *v});
          sum += *v;
          ++defined;
        } else {
          rows[k].cells.push_back({Cell::Kind::undefined, 0});
        }
      }
      rows.back().cells.push_back(defined ? Cell{Cell::Kind::value, sum / defined} : Cell{Cell::Kind::undefined, 0});
    }
    table.rows.insert(table.rows.end(), rows.begin(), rows.end());
  };
  add_group(dataset + " Seg", "JI", "mean IOU", seg_classes,
            [](const ColumnMetrics& m) -> const auto& { return m.seg_iou; });
  add_group(dataset + " Det", "AP", "mean AP", det_classes,
            [](const ColumnMetrics& m) -> const auto& { return m.det_ap; });
  return table;
}

void write_results_csv(std::ostream& os, const ResultsTable& table) {
  os << "Databases,Metrics";
  for (const auto& c : table.columns) os << ',' << c;
  os << '\n';
  for (const auto& row : table.rows) {
    os << row.group << ',' << row.metric;
    for (const auto& cell : row.cells) {
      os << ',';
      if (cell.kind == TableRow::Cell::Kind::undefined) {
        os << "n/a";
      } else if (cell.kind == TableRow::Cell::Kind::value) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", cell.value);
        os << buf;
      }
    }
    os << '\n';
  }
}

nlohmann::json results_json(const ResultsTable& table) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : table.rows) {
    nlohmann::json values = nlohmann::json::object();
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      const auto& cell = row.cells[c];
      switch (cell.kind) {
        case TableRow::Cell::Kind::blank: values[table.columns[c]] = nullptr; break;
        case TableRow::Cell::Kind::undefined: values[table.columns[c]] = "n/a"; break;
        case TableRow::Cell::Kind::value: values[table.columns[c]] = cell.value; break;
      }
    }
    rows.push_back({{"group", row.group}, {"metric", row.metric}, {"mean", row.is_mean}, {"values", values}});
  }
  return {{"schema", "mtlnet.results/1"}, {"columns", table.columns}, {"rows", rows}};
}

}  // namespace mtlnet
