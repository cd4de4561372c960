#pragma once

// ADAM, batching, the training loop and the single-task / multi-task study.

#include "mtlnet/data.hpp"
#include "mtlnet/loss.hpp"
#include "mtlnet/metrics.hpp"
#include "mtlnet/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mtlnet {

struct OptimizerConfig {
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index steps = 0;
  Index batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

template <typename Scalar>
struct AdamState {
  std::map<std::string, Buffer<Scalar>> m, v;
  std::int64_t step = 0;
};

template <typename Scalar>
using GradMap = std::map<std::string, Buffer<Scalar>>;

// Gradients of every trainable tensor; tensors without a gradient get zeros.
template <typename Scalar>
GradMap<Scalar> collect_grads(const ModelParams<Scalar>& params);

// One bias-corrected ADAM update of every tensor named in `grads`. Throws
// NonFiniteError naming the first tensor with a NaN/Inf gradient, before
// anything is modified.
template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, const GradMap<Scalar>& grads, AdamState<Scalar>& state,
               const OptimizerConfig& cfg);

// --- batches and losses ---------------------------------------------------

template <typename Scalar>
struct Batch {
  Tensor<Scalar> images;                 // [N,3,H,W]
  std::vector<std::uint8_t> seg;         // N*H*W labels
  std::vector<std::uint8_t> valid;       // empty, or 0 for rows excluded from the seg loss
  std::vector<std::vector<GtBox>> boxes;
};

// Samples are resized to the model input when their size differs. With a
// horizon row, pixels above it are excluded from the segmentation loss.
template <typename Scalar>
Batch<Scalar> make_batch(const std::vector<const Sample*>& samples, const ModelSpec& spec,
                         std::optional<Index> horizon_row = {});

template <typename Scalar>
struct TaskLosses {
  Tensor<Scalar> seg;  // undefined when the model has no seg head
  Tensor<Scalar> det;  // undefined when the model has no det head
  Tensor<Scalar> total;
};

// The one code path every experiment uses: shared encoder, the heads the
// spec enables, and total = w_seg * L_seg + w_det * L_det.
template <typename Scalar>
TaskLosses<Scalar> compute_losses(ModelParams<Scalar>& params, const ModelSpec& spec,
                                  const Batch<Scalar>& batch, const LossWeights& weights,
                                  BatchNormMode mode, const DetLossConfig& det_cfg = {});

// --- experiments ----------------------------------------------------------

struct EvalOptions {
  double score_threshold = 0.01;
  double nms_iou = 0.45;
  double ap_iou = 0.5;
  Index batch_size = 8;
  std::optional<double> horizon_fraction;
};

struct EvalResult {
  std::optional<SegIou> seg;
  std::optional<ApResult> det;
};

template <typename Scalar>
EvalResult evaluate(ModelParams<Scalar>& params, const ModelSpec& spec, const std::vector<Sample>& samples,
                    const EvalOptions& opts = {});

// Names of the five comparison columns as experiment names (space -> '_').
const std::vector<std::string>& experiment_presets();
std::string experiment_name_for_column(const std::string& column);

struct ExperimentConfig {
  std::string name = "MTL";
  ModelSpec model;
  LossWeights weights;
  OptimizerConfig optimizer;
  DetLossConfig det_loss;
  // Datasets on disk, or generated on the fly from a scene config when the
  // path is empty. With no eval source the training set is evaluated.
  std::filesystem::path train_data, eval_data;
  std::optional<SceneConfig> train_scene, eval_scene;
  Index train_count = 0, eval_count = 0;  // samples to generate
  Index train_limit = 0, eval_limit = 0;  // 0 = whole set
  Index eval_every = 0;                    // 0 = final evaluation only
  EvalOptions eval;
  std::optional<double> horizon_fraction;  // seg loss and evaluation below this row only

  // STL_Seg / STL_Det / MTL / MTL_10 / MTL_100 fix heads and weights;
  // "custom" keeps whatever was configured.
  void apply_preset();
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);
// Applies the preset and rejects weights or heads that contradict it.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Training and evaluation samples for an experiment. Generated sets are
// written under `scratch` (train/, eval/) so runs stay inspectable.
struct ExperimentData {
  std::vector<Sample> train, eval;
};
ExperimentData load_experiment_data(const ExperimentConfig& exp, const std::filesystem::path& scratch);

struct StepLog {
  Index step = 0;
  std::optional<double> seg, det;
  double total = 0;
};

struct TrainResult {
  std::vector<StepLog> losses;
  std::vector<std::pair<Index, EvalResult>> evals;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Trains from build(spec, optimizer.seed). Writes loss.csv, eval.csv,
// model.json and final.mtlw into out_dir unless it is empty. On a NaN/Inf
// loss or gradient, writes the logs and last_good.mtlw, then throws
// TrainingDiverged.
template <typename Scalar>
TrainResult train(const ExperimentConfig& exp, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& eval_set, const std::filesystem::path& out_dir,
                  ModelParams<Scalar>* trained = nullptr);

void write_loss_csv(std::ostream& os, const std::vector<StepLog>& log, const LossWeights& w);
void write_eval_csv(std::ostream& os, const std::vector<std::pair<Index, EvalResult>>& evals,
                    const ModelSpec& spec);

// Dataset sample order of training step `step`: keyed Fisher-Yates shuffle
// per epoch, batches taken consecutively across epoch boundaries.
std::vector<Index> batch_indices(std::uint64_t seed, Index dataset_size, Index batch_size, Index step);

// --- comparison study -----------------------------------------------------

struct StudyConfig {
  ExperimentConfig base;  // model, optimizer and data shared by every column
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> columns = study_columns();
  std::string dataset_name = "Synthetic";
};

void to_json(nlohmann::json& j, const StudyConfig& c);
void from_json(const nlohmann::json& j, StudyConfig& c);

struct RunSummary {
  std::string column;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  EvalResult eval;
  std::optional<double> initial_seg, initial_det, final_seg, final_det;
};

struct StudyResult {
  ResultsTable table;
  std::vector<RunSummary> runs;
  std::map<std::string, std::optional<double>> median_miou, median_map;
};

// Trains every column for every seed (column failures are recorded and the
// rest proceed), reports per-class medians over seeds, and writes
// results.csv / results.json plus one run directory per (column, seed).
template <typename Scalar>
StudyResult run_study(const StudyConfig& cfg, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& eval_set, const std::filesystem::path& out_dir);

nlohmann::json study_json(const StudyResult& result);

std::optional<double> median(std::vector<double> values);

}  // namespace mtlnet
