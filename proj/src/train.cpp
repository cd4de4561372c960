#include "mtlnet/train.hpp"

#include "mtlnet/postproc.hpp"
#include "mtlnet/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

namespace mtlnet {

namespace {
constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;

std::string num(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }
}  // namespace

void OptimizerConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("optimizer lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
    throw std::invalid_argument("optimizer betas must lie in [0, 1)");
  }
  if (!(eps > 0)) throw std::invalid_argument("optimizer eps must be > 0");
  if (steps < 0) throw std::invalid_argument("optimizer steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("optimizer batch_size must be >= 1");
}

template <typename Scalar>
GradMap<Scalar> collect_grads(const ModelParams<Scalar>& params) {
  GradMap<Scalar> out;
  for (const auto& name : params.trainable_names()) {
    const auto& t = params.at(name);
    out[name] = t.has_grad() ? t.grad() : Buffer<Scalar>::Zero(t.numel());
  }
  return out;
}

template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, const GradMap<Scalar>& grads, AdamState<Scalar>& state,
               const OptimizerConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (!g.allFinite()) throw NonFiniteError("non-finite gradient in " + name);
    if (g.size() != params.at(name).numel()) throw ShapeError("gradient size mismatch for " + name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Scalar c1 = static_cast<Scalar>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const Scalar c2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar lr = static_cast<Scalar>(cfg.lr), eps = static_cast<Scalar>(cfg.eps);
  for (const auto& [name, g] : grads) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() == 0) {
      m = Buffer<Scalar>::Zero(g.size());
      v = Buffer<Scalar>::Zero(g.size());
    }
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.square();
    params.at(name).mutable_data() -= lr * (m * c1) / ((v * c2).sqrt() + eps);
  }
}

template <typename Scalar>
Batch<Scalar> make_batch(const std::vector<const Sample*>& samples, const ModelSpec& spec,
                         std::optional<Index> horizon_row) {
  const Index n = static_cast<Index>(samples.size());
  const Index h = spec.input_height, w = spec.input_width, hw = h * w;
  Batch<Scalar> b;
  Buffer<Scalar> data(n * 3 * hw);
  b.seg.resize(static_cast<std::size_t>(n * hw));
  for (Index i = 0; i < n; ++i) {
    const Sample& s = *samples[i];
    const bool same = s.image.height == h && s.image.width == w;
    const RgbImage image = same ? s.image : resize_bilinear(s.image, h, w);
    const GrayImage seg = same ? s.seg : resize_nearest(s.seg, h, w);
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          data[(i * 3 + c) * hw + y * w + x] = static_cast<Scalar>(image.at(x, y, c)) / Scalar(255);
        }
      }
    }
    std::copy(seg.pixels.begin(), seg.pixels.end(), b.seg.begin() + i * hw);
    b.boxes.push_back(s.boxes);
  }
  if (horizon_row) {
    b.valid.assign(b.seg.size(), 1);
    for (Index i = 0; i < n; ++i) {
      std::fill_n(b.valid.begin() + i * hw, std::clamp<Index>(*horizon_row, 0, h) * w, 0);
    }
  }
  b.images = Tensor<Scalar>({n, 3, h, w}, std::move(data));
  return b;
}

template <typename Scalar>
TaskLosses<Scalar> compute_losses(ModelParams<Scalar>& params, const ModelSpec& spec,
                                  const Batch<Scalar>& batch, const LossWeights& weights,
                                  BatchNormMode mode, const DetLossConfig& det_cfg) {
  TaskLosses<Scalar> out;
  const EncoderFeatures<Scalar> feats = forward_encoder(params, spec, batch.images, mode);
  if (spec.seg_head) out.seg = seg_loss(forward_seg(params, spec, feats), batch.seg, batch.valid);
  if (spec.det_head) {
    const Tensor<Scalar> raw = forward_det(params, spec, feats, mode);
    const DetTargets targets = assign_targets(batch.boxes, raw.dim(2), raw.dim(3), spec.anchors,
                                              static_cast<Index>(spec.det_classes.size()));
    out.det = det_loss(raw, targets, det_cfg);
  }
  out.total = mtl_loss(out.seg, out.det, weights);
  return out;
}

template <typename Scalar>
EvalResult evaluate(ModelParams<Scalar>& params, const ModelSpec& spec, const std::vector<Sample>& samples,
                    const EvalOptions& opts) {
  NoGradGuard no_grad;
  const Index h = spec.input_height, w = spec.input_width;
  std::optional<Index> horizon;
  if (opts.horizon_fraction) horizon = static_cast<Index>(std::floor(*opts.horizon_fraction * double(h)));
  ConfusionMatrix cm(spec.seg_channels());
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<LabeledBox>> gts;
  const Index n = static_cast<Index>(samples.size());
  for (Index begin = 0; begin < n; begin += opts.batch_size) {
    std::vector<const Sample*> chunk;
    for (Index i = begin; i < std::min(n, begin + opts.batch_size); ++i) chunk.push_back(&samples[i]);
    const Batch<Scalar> batch = make_batch<Scalar>(chunk, spec);
    const auto feats = forward_encoder(params, spec, batch.images, BatchNormMode::eval);
    if (spec.seg_head) {
      const auto masks = seg_argmax(forward_seg(params, spec, feats), horizon);
      for (std::size_t k = 0; k < masks.size(); ++k) {
        accumulate_confusion(masks[k], std::span<const std::uint8_t>(batch.seg).subspan(k * h * w, h * w), cm);
      }
    }
    if (spec.det_head) {
      const auto raw = forward_det(params, spec, feats, BatchNormMode::eval);
      auto decoded = decode_boxes(raw, spec.anchors, static_cast<Index>(spec.det_classes.size()), h, w);
      for (std::size_t k = 0; k < decoded.size(); ++k) {
        dets.push_back(nms(std::move(decoded[k]), opts.nms_iou, opts.score_threshold));
        gts.push_back(labeled_boxes(batch.boxes[k], w, h));
      }
    }
  }
  EvalResult r;
  if (spec.seg_head) r.seg = seg_iou(cm);
  if (spec.det_head) r.det = det_ap(dets, gts, static_cast<Index>(spec.det_classes.size()), opts.ap_iou);
  return r;
}

const std::vector<std::string>& experiment_presets() {
  static const std::vector<std::string> names{"STL_Seg", "STL_Det", "MTL", "MTL_10", "MTL_100"};
  return names;
}

std::string experiment_name_for_column(const std::string& column) {
  std::string name = column;
  std::replace(name.begin(), name.end(), ' ', '_');
  return name;
}

namespace {

struct Preset {
  bool seg, det;
  LossWeights weights;
};

std::optional<Preset> preset_for(const std::string& name) {
  if (name == "STL_Seg") return Preset{true, false, {1, 0}};
  if (name == "STL_Det") return Preset{false, true, {0, 1}};
  if (name == "MTL") return Preset{true, true, {1, 1}};
  if (name == "MTL_10") return Preset{true, true, {10, 1}};
  if (name == "MTL_100") return Preset{true, true, {100, 1}};
  if (name == "custom") return std::nullopt;
  throw std::invalid_argument("unknown experiment name '" + name + "'");
}

}  // namespace

void ExperimentConfig::apply_preset() {
  if (const auto p = preset_for(name)) {
    model.seg_head = p->seg;
    model.det_head = p->det;
    weights = p->weights;
  }
}

void ExperimentConfig::validate() const {
  model.validate();
  weights.validate();
  optimizer.validate();
  if (const auto p = preset_for(name)) {
    if (model.seg_head != p->seg || model.det_head != p->det || weights.seg != p->weights.seg ||
        weights.det != p->weights.det) {
      throw std::invalid_argument("experiment '" + name + "' requires heads/weights of its preset");
    }
  }
  if (model.seg_head == false && weights.seg != 0) throw std::invalid_argument("w_seg > 0 without a seg head");
  if (model.det_head == false && weights.det != 0) throw std::invalid_argument("w_det > 0 without a det head");
  if (eval_every < 0) throw std::invalid_argument("eval_every must be >= 0");
  if (horizon_fraction && !(*horizon_fraction >= 0 && *horizon_fraction < 1)) {
    throw std::invalid_argument("horizon_fraction must lie in [0, 1)");
  }
  if (train_data.empty() && !train_scene) throw std::invalid_argument("experiment has no training data");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps},
       {"steps", c.steps}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c = OptimizerConfig{};
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"schema", "mtlnet.experiment/1"},
       {"name", c.name},
       {"model", c.model},
       {"weights", {{"seg", c.weights.seg}, {"det", c.weights.det}}},
       {"optimizer", c.optimizer},
       {"det_loss", {{"lambda_coord", c.det_loss.lambda_coord}, {"lambda_noobj", c.det_loss.lambda_noobj}}},
       {"train_limit", c.train_limit},
       {"eval_limit", c.eval_limit},
       {"eval_every", c.eval_every},
       {"eval",
        {{"score_threshold", c.eval.score_threshold},
         {"nms_iou", c.eval.nms_iou},
         {"ap_iou", c.eval.ap_iou},
         {"batch_size", c.eval.batch_size}}}};
  if (!c.train_data.empty()) j["train_data"] = c.train_data.string();
  if (!c.eval_data.empty()) j["eval_data"] = c.eval_data.string();
  if (c.train_scene) j["train_scene"] = {{"config", *c.train_scene}, {"count", c.train_count}};
  if (c.eval_scene) j["eval_scene"] = {{"config", *c.eval_scene}, {"count", c.eval_count}};
  if (c.horizon_fraction) j["horizon_fraction"] = *c.horizon_fraction;
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("schema") && j.at("schema") != "mtlnet.experiment/1") {
    throw std::invalid_argument("unsupported experiment schema " + j.at("schema").dump());
  }
  c.name = j.value("name", c.name);
  if (j.contains("model")) c.model = j.at("model").get<ModelSpec>();
  const bool heads_given = j.contains("model") && j.at("model").contains("heads");
  const bool weights_given = j.contains("weights");
  if (weights_given) {
    c.weights.seg = j.at("weights").value("seg", c.weights.seg);
    c.weights.det = j.at("weights").value("det", c.weights.det);
  }
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  if (j.contains("det_loss")) {
    c.det_loss.lambda_coord = j.at("det_loss").value("lambda_coord", c.det_loss.lambda_coord);
    c.det_loss.lambda_noobj = j.at("det_loss").value("lambda_noobj", c.det_loss.lambda_noobj);
  }
  c.train_data = j.value("train_data", std::string());
  c.eval_data = j.value("eval_data", std::string());
  if (j.contains("train_scene")) {
    c.train_scene = j.at("train_scene").at("config").get<SceneConfig>();
    c.train_count = j.at("train_scene").at("count").get<Index>();
  }
  if (j.contains("eval_scene")) {
    c.eval_scene = j.at("eval_scene").at("config").get<SceneConfig>();
    c.eval_count = j.at("eval_scene").at("count").get<Index>();
  }
  c.train_limit = j.value("train_limit", c.train_limit);
  c.eval_limit = j.value("eval_limit", c.eval_limit);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.score_threshold = e.value("score_threshold", c.eval.score_threshold);
    c.eval.nms_iou = e.value("nms_iou", c.eval.nms_iou);
    c.eval.ap_iou = e.value("ap_iou", c.eval.ap_iou);
    c.eval.batch_size = e.value("batch_size", c.eval.batch_size);
  }
  if (j.contains("horizon_fraction")) c.horizon_fraction = j.at("horizon_fraction").get<double>();

  if (const auto p = preset_for(c.name)) {
    if (weights_given && (c.weights.seg != p->weights.seg || c.weights.det != p->weights.det)) {
      throw std::invalid_argument("experiment '" + c.name + "' fixes its loss weights; remove \"weights\"");
    }
    if (heads_given && (c.model.seg_head != p->seg || c.model.det_head != p->det)) {
      throw std::invalid_argument("experiment '" + c.name + "' fixes its heads; remove \"model.heads\"");
    }
    c.apply_preset();
  }
  c.validate();
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open experiment config " + path.string());
  return nlohmann::json::parse(in).get<ExperimentConfig>();
}

ExperimentData load_experiment_data(const ExperimentConfig& exp, const std::filesystem::path& scratch) {
  auto load = [&](const std::filesystem::path& dir, const std::optional<SceneConfig>& scene, Index count,
                  Index limit, const char* sub) -> std::vector<Sample> {
    if (!dir.empty()) return load_dataset_prefix(dir, limit).samples;
    if (!scene) return {};
    const auto target = scratch / sub;
    write_dataset(target, *scene, count);
    return load_dataset_prefix(target, limit).samples;
  };
  ExperimentData data;
  data.train = load(exp.train_data, exp.train_scene, exp.train_count, exp.train_limit, "train");
  data.eval = load(exp.eval_data, exp.eval_scene, exp.eval_count, exp.eval_limit, "eval");
  if (data.train.empty()) throw std::runtime_error("training set is empty");
  return data;
}

std::vector<Index> batch_indices(std::uint64_t seed, Index dataset_size, Index batch_size, Index step) {
  if (dataset_size <= 0) throw std::invalid_argument("empty dataset");
  std::vector<Index> out;
  std::vector<Index> perm;
  Index perm_epoch = -1;
  for (Index p = 0; p < batch_size; ++p) {
    const Index g = step * batch_size + p;
    const Index epoch = g / dataset_size;
    if (epoch != perm_epoch) {
      perm.resize(static_cast<std::size_t>(dataset_size));
      std::iota(perm.begin(), perm.end(), Index{0});
      Rng rng = Rng::keyed(seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
      for (Index i = dataset_size - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
      perm_epoch = epoch;
    }
    out.push_back(perm[g % dataset_size]);
  }
  return out;
}

void write_loss_csv(std::ostream& os, const std::vector<StepLog>& log, const LossWeights& w) {
  os << "step,L_seg,L_det,L_total,w_seg,w_det\n";
  for (const auto& s : log) {
    os << s.step << ',' << opt_num(s.seg) << ',' << opt_num(s.det) << ',' << num(s.total) << ','
       << num(w.seg) << ',' << num(w.det) << '\n';
  }
}

void write_eval_csv(std::ostream& os, const std::vector<std::pair<Index, EvalResult>>& evals,
                    const ModelSpec& spec) {
  os << "step,mean_iou,mean_ap";
  for (const auto& c : spec.seg_classes) os << ",iou_" << c;
  for (const auto& c : spec.det_classes) os << ",ap_" << c;
  os << '\n';
  for (const auto& [step, r] : evals) {
    os << step << ',' << (r.seg ? opt_num(r.seg->mean) : "") << ',' << (r.det ? opt_num(r.det->mean) : "");
    for (std::size_t k = 0; k < spec.seg_classes.size(); ++k) os << ',' << (r.seg ? opt_num(r.seg->per_class[k]) : "");
    for (std::size_t k = 0; k < spec.det_classes.size(); ++k) os << ',' << (r.det ? opt_num(r.det->per_class[k]) : "");
    os << '\n';
  }
}

template <typename Scalar>
TrainResult train(const ExperimentConfig& exp, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& eval_set, const std::filesystem::path& out_dir,
                  ModelParams<Scalar>* trained) {
  exp.validate();
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  const ModelSpec& spec = exp.model;
  const OptimizerConfig& opt = exp.optimizer;
  std::optional<Index> horizon;
  if (exp.horizon_fraction) horizon = static_cast<Index>(std::floor(*exp.horizon_fraction * double(spec.input_height)));
  EvalOptions eval_opts = exp.eval;
  eval_opts.horizon_fraction = exp.horizon_fraction;
  const std::vector<Sample>& eval_samples = eval_set.empty() ? train_set : eval_set;

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    save_model_spec(out_dir / "model.json", spec);
  }
  auto write_logs = [&](const TrainResult& r) {
    if (out_dir.empty()) return;
    std::ofstream loss(out_dir / "loss.csv");
    write_loss_csv(loss, r.losses, exp.weights);
    std::ofstream eval(out_dir / "eval.csv");
    write_eval_csv(eval, r.evals, spec);
  };

  ModelParams<Scalar> params = build<Scalar>(spec, opt.seed);
  AdamState<Scalar> state;
  TrainResult result;
  const Index n = static_cast<Index>(train_set.size());
  for (Index step = 0; step < opt.steps; ++step) {
    std::vector<const Sample*> chosen;
    for (Index i : batch_indices(opt.seed, n, opt.batch_size, step)) chosen.push_back(&train_set[i]);
    const Batch<Scalar> batch = make_batch<Scalar>(chosen, spec, horizon);
    params.zero_grad();
    try {
      const TaskLosses<Scalar> losses = compute_losses(params, spec, batch, exp.weights, BatchNormMode::train, exp.det_loss);
      StepLog log{step, {}, {}, double(losses.total.item())};
      if (losses.seg.defined()) log.seg = double(losses.seg.item());
      if (losses.det.defined()) log.det = double(losses.det.item());
      result.losses.push_back(log);
      losses.total.backward();
      adam_step(params, collect_grads(params), state, opt);
    } catch (const NonFiniteError& e) {
      write_logs(result);
      if (!out_dir.empty()) save_checkpoint(out_dir / "last_good.mtlw", params);
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (exp.eval_every > 0 && (step + 1) % exp.eval_every == 0 && step + 1 < opt.steps) {
      result.evals.emplace_back(step + 1, evaluate(params, spec, eval_samples, eval_opts));
    }
  }
  params.zero_grad();
  result.evals.emplace_back(opt.steps, evaluate(params, spec, eval_samples, eval_opts));
  write_logs(result);
  if (!out_dir.empty()) save_checkpoint(out_dir / "final.mtlw", params);
  if (trained) *trained = std::move(params);
  return result;
}

#define MTLNET_INSTANTIATE_TRAIN(S)                                                                   \
  template GradMap<S> collect_grads(const ModelParams<S>&);                                          \
  template void adam_step(ModelParams<S>&, const GradMap<S>&, AdamState<S>&, const OptimizerConfig&); \
  template Batch<S> make_batch(const std::vector<const Sample*>&, const ModelSpec&, std::optional<Index>); \
  template TaskLosses<S> compute_losses(ModelParams<S>&, const ModelSpec&, const Batch<S>&,          \
                                        const LossWeights&, BatchNormMode, const DetLossConfig&);    \
  template EvalResult evaluate(ModelParams<S>&, const ModelSpec&, const std::vector<Sample>&,         \
                               const EvalOptions&);                                                  \
  template TrainResult train(const ExperimentConfig&, const std::vector<Sample>&,                     \
                             const std::vector<Sample>&, const std::filesystem::path&, ModelParams<S>*);

MTLNET_INSTANTIATE_TRAIN(float)
MTLNET_INSTANTIATE_TRAIN(double)

}  // namespace mtlnet
