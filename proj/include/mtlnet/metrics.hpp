#pragma once

// Segmentation IoU (Jaccard index) and detection average precision, plus the
// single-task vs multi-task comparison table built from them.

#include "mtlnet/box.hpp"
#include "mtlnet/postproc.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mtlnet {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(Index classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  Index classes() const { return classes_; }
  std::int64_t at(Index gt, Index pred) const { return counts_[gt * classes_ + pred]; }
  std::int64_t& at(Index gt, Index pred) { return counts_[gt * classes_ + pred]; }
  std::int64_t total() const;
  std::int64_t row_sum(Index gt) const;
  std::int64_t col_sum(Index pred) const;
  ConfusionMatrix& merge(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  Index classes_;
  std::vector<std::int64_t> counts_;  // rows = ground truth, cols = prediction
};

// cm[gt, pred] += 1 for every pixel where neither side is ignored/unevaluated.
ConfusionMatrix& accumulate_confusion(const SegMask& pred, std::span<const std::uint8_t> gt,
                                      ConfusionMatrix& cm);

struct SegIou {
  std::vector<std::optional<double>> per_class;  // nullopt: class absent in GT and prediction
  std::optional<double> mean;                    // over defined classes
};

SegIou seg_iou(const ConfusionMatrix& cm);

struct PRCurve {
  std::vector<double> scores;     // sorted descending
  std::vector<std::uint8_t> tp;   // 1 = true positive
  std::vector<double> precision;  // cumulative
  std::vector<double> recall;     // cumulative
  Index num_gt = 0;
};

// Detections of one class ranked by score (ties: image index, then position
// in that image's list), each greedily matched to the unmatched ground truth
// of highest IoU >= iou_thresh.
PRCurve pr_curve(int class_idx, const std::vector<std::vector<Detection>>& dets,
                 const std::vector<std::vector<LabeledBox>>& gts, double iou_thresh);

// Area under the monotone precision envelope, all recall points.
double average_precision(const PRCurve& curve);

struct ApResult {
  std::vector<std::optional<double>> per_class;  // nullopt: class has no ground truth
  std::optional<double> mean;
};

ApResult det_ap(const std::vector<std::vector<Detection>>& dets,
                const std::vector<std::vector<LabeledBox>>& gts, Index num_classes,
                double iou_thresh = 0.5);

// --- comparison table -----------------------------------------------------

inline const std::vector<std::string>& study_columns() {
  static const std::vector<std::string> cols{"STL Seg", "STL Det", "MTL", "MTL_10", "MTL_100"};
  return cols;
}

// Metric values of one trained column; a task the column did not train is
// left as nullopt and renders blank.
struct ColumnMetrics {
  std::optional<std::vector<std::optional<double>>> seg_iou;
  std::optional<std::vector<std::optional<double>>> det_ap;
};

struct TableRow {
  std::string group;   // e.g. "Synthetic Seg"
  std::string metric;  // e.g. "JI road", "mean IOU"
  bool is_mean = false;
  // Per column: blank (not trained), n/a (undefined) or a value.
  struct Cell {
    enum class Kind { blank, undefined, value } kind = Kind::blank;
    double value = 0;
  };
  std::vector<Cell> cells;
};

struct ResultsTable {
  std::vector<std::string> columns;
  std::vector<TableRow> rows;
};

// One row per class metric followed by a mean row per task, columns in the
// fixed STL Seg / STL Det / MTL / MTL_10 / MTL_100 order. Mean rows are the
// mean of the defined class rows of the same column.
ResultsTable report_table(const std::map<std::string, ColumnMetrics>& results,
                          const std::vector<std::string>& seg_classes,
                          const std::vector<std::string>& det_classes,
                          const std::string& dataset = "Synthetic");

void write_results_csv(std::ostream& os, const ResultsTable& table);
nlohmann::json results_json(const ResultsTable& table);

}  // namespace mtlnet
