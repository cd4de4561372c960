// Acceptance checks. `mtlnet_acceptance [name...]` runs the named criteria
// (all when none are given) and prints one PASS/FAIL line each.

#include "oracles.hpp"

#include "mtlnet/bench.hpp"
#include "mtlnet/cli.hpp"
#include "mtlnet/fisheye.hpp"
#include "mtlnet/gradcheck.hpp"
#include "mtlnet/hash.hpp"
#include "mtlnet/train.hpp"

#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace mtlnet;

namespace {

const fs::path kSourceDir = MTLNET_SOURCE_DIR;
const fs::path kWorkDir = fs::path(MTLNET_WORK_DIR) / "acceptance";

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = kWorkDir / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// --- gradients -------------------------------------------------------------

Outcome gradients() {
  Stopwatch sw;
  const auto results = gradcheck_suite();
  const double secs = sw.seconds();
  bool ok = true;
  double worst = 0;
  for (const auto& r : results) {
    ok = ok && r.passed;
    worst = std::max(worst, r.max_rel_err);
    if (!r.passed) {
      std::printf("  %s: rel-err %.3g, excluded %lld/%lld\n", r.name.c_str(), r.max_rel_err,
                  static_cast<long long>(r.excluded), static_cast<long long>(r.entries));
    }
  }
  const auto& net = results.back();
  return {ok && secs < 120.0,
          fmt("%zu cases, worst rel-err %.3g (< 1e-6), micro network %lld params rel-err %.3g, %.1f s (< 120 s)",
              results.size(), worst, static_cast<long long>(net.entries), net.max_rel_err, secs)};
}

// --- oracles ---------------------------------------------------------------

Tensor<double> random_tensor(Rng& rng, const Shape& shape) {
  Buffer<double> b(numel_of(shape));
  for (Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-1, 1);
  return Tensor<double>(shape, b);
}

// max |a - b| over max |b|.
double scaled_err(const oracle::Array4& a, const oracle::Array4& b) {
  if (a.shape != b.shape) return INFINITY;
  double diff = 0, mag = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    diff = std::max(diff, std::abs(a.v[i] - b.v[i]));
    mag = std::max(mag, std::abs(b.v[i]));
  }
  return mag > 0 ? diff / mag : diff;
}

Outcome oracles() {
  constexpr int kSeeds = 100;
  double conv_err = 0, deconv_err = 0, pool_err = 0;
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng = Rng::keyed(11, 0, s);
    ConvSpec cs;
    cs.in_ch = rng.uniform_int(1, 4);
    cs.out_ch = rng.uniform_int(1, 4);
    const Index k = std::array<Index, 3>{1, 3, 5}[rng.uniform_int(0, 2)];
    cs.kernel = {k, k};
    const Index st = rng.uniform_int(1, 2);
    cs.stride = {st, st};
    const Index pad = rng.uniform_int(0, k / 2);
    cs.padding = {pad, pad};
    cs.has_bias = rng.uniform() < 0.5;
    const Index n = rng.uniform_int(1, 2), h = rng.uniform_int(k, 10), w = rng.uniform_int(k, 10);
    const auto x = random_tensor(rng, {n, cs.in_ch, h, w});
    const auto wt = random_tensor(rng, {cs.out_ch, cs.in_ch, k, k});
    Tensor<double> bias;
    std::vector<double> bias_v;
    if (cs.has_bias) {
      bias = random_tensor(rng, {cs.out_ch});
      for (Index i = 0; i < cs.out_ch; ++i) bias_v.push_back(bias.data()[i]);
    }
    conv_err = std::max(conv_err, scaled_err(oracle::from_tensor(conv2d(x, wt, bias, cs)),
                                             oracle::conv2d(oracle::from_tensor(x), oracle::from_tensor(wt),
                                                            bias_v, cs)));

    const Index ds = rng.uniform_int(1, 4);
    const Index dk = ds + 2 * rng.uniform_int(0, 2);
    const Index ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const auto dx = random_tensor(rng, {n, ci, rng.uniform_int(1, 5), rng.uniform_int(1, 5)});
    const auto dw = random_tensor(rng, {ci, co, dk, dk});
    deconv_err = std::max(deconv_err, scaled_err(oracle::from_tensor(deconv2d(dx, dw, ds)),
                                                 oracle::deconv2d(oracle::from_tensor(dx),
                                                                  oracle::from_tensor(dw), ds)));

    const Index pk = rng.uniform_int(1, 3), ps = rng.uniform_int(1, 2), pp = rng.uniform_int(0, pk / 2);
    const auto px = random_tensor(rng, {n, 2, rng.uniform_int(pk, 9), rng.uniform_int(pk, 9)});
    pool_err = std::max(pool_err, scaled_err(oracle::from_tensor(maxpool2d(px, pk, ps, pp)),
                                             oracle::maxpool2d(oracle::from_tensor(px), pk, ps, pp)));
  }

  int nms_mismatch = 0;
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng = Rng::keyed(11, 1, s);
    const int n = static_cast<int>(rng.uniform_int(1, 200));
    auto dets = oracle::random_detections(rng, n, 3, 120);
    // Every other seed on a coarse score grid to exercise the tie order.
    if (s % 2) {
      for (auto& d : dets) d.score = std::round(d.score * 8) / 8;
    }
    const double iou = rng.uniform(0.2, 0.7), thresh = rng.uniform(0.0, 0.3);
    if (nms(dets, iou, thresh) != oracle::nms(dets, iou, thresh)) ++nms_mismatch;
  }

  int iou_mismatch = 0;
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng = Rng::keyed(11, 2, s);
    const int classes = static_cast<int>(rng.uniform_int(2, 5));
    const Index w = rng.uniform_int(1, 12), h = rng.uniform_int(1, 12);
    std::vector<std::vector<std::uint8_t>> preds, gts;
    ConfusionMatrix cm(classes);
    for (int img = 0, images = static_cast<int>(rng.uniform_int(1, 3)); img < images; ++img) {
      SegMask mask;
      mask.width = w;
      mask.height = h;
      std::vector<std::uint8_t> gt;
      for (Index p = 0; p < w * h; ++p) {
        const double u = rng.uniform();
        mask.labels.push_back(u < 0.05 ? kUnevaluated : static_cast<std::uint8_t>(rng.uniform_int(0, classes - 1)));
        // Keep the last class rare so it is sometimes absent.
        const auto g = rng.uniform_int(0, classes - 1);
        gt.push_back(u > 0.95 ? kIgnoreLabel : static_cast<std::uint8_t>(g == classes - 1 && u < 0.5 ? 0 : g));
      }
      accumulate_confusion(mask, gt, cm);
      preds.push_back(mask.labels);
      gts.push_back(gt);
    }
    const auto lib = seg_iou(cm);
    const auto ref = oracle::seg_iou(preds, gts, classes);
    if (lib.per_class != ref.per_class || lib.mean.has_value() != ref.mean.has_value() ||
        (lib.mean && std::abs(*lib.mean - *ref.mean) > 1e-12)) {
      ++iou_mismatch;
    }
  }

  double ap_err = 0;
  int ap_undefined_mismatch = 0;
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng = Rng::keyed(11, 3, s);
    const int images = static_cast<int>(rng.uniform_int(1, 5));
    std::vector<std::vector<Detection>> dets(images);
    std::vector<std::vector<LabeledBox>> gts(images);
    for (int i = 0; i < images; ++i) {
      for (int g = 0, ng = static_cast<int>(rng.uniform_int(0, 6)); g < ng; ++g) {
        gts[i].push_back({static_cast<int>(rng.uniform_int(0, 2)), oracle::random_box(rng, 100, 8, 40)});
      }
      for (const auto& g : gts[i]) {
        // Jittered copies of ground truth plus unrelated clutter.
        for (int c = 0, nc = static_cast<int>(rng.uniform_int(0, 2)); c < nc; ++c) {
          const double j = rng.uniform(0, 6);
          const Box b{g.box.x1 + rng.uniform(-j, j), g.box.y1 + rng.uniform(-j, j), g.box.x2 + rng.uniform(-j, j),
                      g.box.y2 + rng.uniform(-j, j)};
          dets[i].push_back({rng.uniform() < 0.8 ? g.class_idx : static_cast<int>(rng.uniform_int(0, 2)),
                             rng.uniform(), b});
        }
      }
      auto clutter = oracle::random_detections(rng, static_cast<int>(rng.uniform_int(0, 5)), 3, 100);
      dets[i].insert(dets[i].end(), clutter.begin(), clutter.end());
      if (s % 2) {
        for (auto& d : dets[i]) d.score = std::round(d.score * 4) / 4;
      }
    }
    const auto lib = det_ap(dets, gts, 3, 0.5);
    for (int c = 0; c < 3; ++c) {
      const auto ref = oracle::average_precision(c, dets, gts, 0.5);
      if (ref.has_value() != lib.per_class[c].has_value()) {
        ++ap_undefined_mismatch;
      } else if (ref) {
        ap_err = std::max(ap_err, std::abs(*ref - *lib.per_class[c]));
      }
    }
  }

  const bool ok = conv_err < 1e-10 && deconv_err < 1e-10 && pool_err < 1e-10 && nms_mismatch == 0 &&
                  iou_mismatch == 0 && ap_err < 1e-9 && ap_undefined_mismatch == 0;
  return {ok, fmt("conv %.2g deconv %.2g maxpool %.2g (< 1e-10); NMS mismatches %d; mIoU mismatches %d; "
                  "AP max diff %.2g (< 1e-9), definedness mismatches %d; %d seeds each",
                  conv_err, deconv_err, pool_err, nms_mismatch, iou_mismatch, ap_err, ap_undefined_mismatch,
                  kSeeds)};
}

// --- linearity -------------------------------------------------------------

std::map<std::string, Buffer<double>> encoder_grads(ModelParams<double>& params, const Tensor<double>& loss) {
  params.zero_grad();
  loss.backward();
  std::map<std::string, Buffer<double>> g;
  for (const auto& [name, t] : params.tensors()) {
    if (name.rfind("enc.", 0) == 0 && !is_buffer_name(name)) {
      g[name] = t.has_grad() ? t.grad() : Buffer<double>::Zero(t.numel());
    }
  }
  return g;
}

Outcome linearity() {
  const ModelSpec spec = micro_spec();
  SceneConfig scene;
  scene.seed = 5;
  scene.height = spec.input_height;
  scene.width = spec.input_width;
  scene.min_center_separation = 16;
  std::vector<Sample> samples{generate(scene, 0), generate(scene, 1)};
  const auto batch = make_batch<double>({&samples[0], &samples[1]}, spec);
  auto params = build<double>(spec, 3);

  auto losses = [&](const LossWeights& w) {
    return compute_losses(params, spec, batch, w, BatchNormMode::train);
  };
  const auto base = losses({1, 1});
  const auto g_seg = encoder_grads(params, base.seg);
  const auto g_det = encoder_grads(params, losses({1, 1}).det);

  double worst = 0, worst_entry = 0;
  std::string detail;
  for (const auto& [ws, wd] : std::vector<std::pair<double, double>>{{1, 1}, {10, 1}, {100, 1}}) {
    const auto g_mtl = encoder_grads(params, losses({ws, wd}).total);
    double case_worst = 0;
    for (const auto& [name, g] : g_mtl) {
      const Buffer<double> expect = ws * g_seg.at(name) + wd * g_det.at(name);
      const double denom = std::max(expect.matrix().norm(), g.matrix().norm());
      const double err = denom > 0 ? (g - expect).matrix().norm() / denom : 0.0;
      case_worst = std::max(case_worst, err);
      const double scale = expect.abs().maxCoeff();
      if (scale > 0) worst_entry = std::max(worst_entry, (g - expect).abs().maxCoeff() / scale);
    }
    worst = std::max(worst, case_worst);
    detail += fmt("w=(%g,%g): %.2g  ", ws, wd, case_worst);
  }
  return {worst < 1e-9, detail + fmt("(per-tensor rel-err < 1e-9, %zu encoder tensors; max entry err / max |g| %.2g)",
                                     g_seg.size(), worst_entry)};
}

// --- overfit ---------------------------------------------------------------

Outcome overfit() {
  Stopwatch sw;
  int good = 0;
  bool all_decrease = true;
  std::string detail;
  auto exp = load_experiment_config(kSourceDir / "configs" / "experiment_mtl.json");
  const fs::path scratch = fresh_dir("overfit");
  const auto data = load_experiment_data(exp, scratch);
  for (std::uint64_t seed : {1, 2, 3}) {
    exp.optimizer.seed = seed;
    const auto result = train<float>(exp, data.train, {}, "");
    const auto& ev = result.evals.back().second;
    const double miou = ev.seg && ev.seg->mean ? *ev.seg->mean : 0.0;
    const double map = ev.det && ev.det->mean ? *ev.det->mean : 0.0;
    const double first = result.losses.front().total, last = result.losses.back().total;
    all_decrease = all_decrease && last < first;
    good += miou > 0.70 && map > 0.80;
    detail += fmt("seed %llu mIoU %.3f mAP %.3f loss %.3f->%.3f; ", static_cast<unsigned long long>(seed), miou,
                  map, first, last);
  }
  const double secs = sw.seconds();
  return {good >= 2 && all_decrease && secs <= 900,
          detail + fmt("%d/3 seeds over mIoU 0.70 and mAP 0.80 (need 2), %s (%zu images, %lld steps, %s, %.0f s)",
                       good, exp.name.c_str(), data.train.size(), static_cast<long long>(exp.optimizer.steps),
                       "128x96 width 0.25", secs)};
}

// --- study -----------------------------------------------------------------

std::string csv_schema(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      out += line + '\n';
      header = false;
      continue;
    }
    std::istringstream cells(line);
    std::string cell;
    int col = 0;
    std::string row;
    while (std::getline(cells, cell, ',')) {
      if (col++) row += ',';
      row += col <= 2 || cell.empty() ? cell : "#";
    }
    if (!line.empty() && line.back() == ',') row += ',';
    out += row + '\n';
  }
  return out;
}

Outcome study() {
  Stopwatch sw;
  std::ifstream f(kSourceDir / "configs" / "study.json");
  StudyConfig cfg = nlohmann::json::parse(f).get<StudyConfig>();
  const fs::path out = fresh_dir("study");
  const auto data = load_experiment_data(cfg.base, out / "data");
  const auto result = run_study<float>(cfg, data.train, data.eval, out);
  const double secs = sw.seconds();

  std::ostringstream csv;
  write_results_csv(csv, result.table);
  const std::string golden = read_file_bytes(kSourceDir / "tests" / "golden" / "results_schema.csv");
  const bool schema_ok = csv_schema(csv.str()) == golden;
  int failed_runs = 0;
  for (const auto& r : result.runs) failed_runs += !r.ok;
  const auto mtl = result.median_miou.at("MTL"), mtl10 = result.median_miou.at("MTL_10");
  const bool order_ok = mtl && mtl10 && *mtl10 >= *mtl;
  std::cout << csv.str();
  return {schema_ok && order_ok && failed_runs == 0 && secs <= 7200,
          fmt("schema %s; median mIoU MTL_10 %.4f >= MTL %.4f; %zu runs, %d failed; %zu train / %zu eval, %.0f s",
              schema_ok ? "matches" : "differs", mtl10.value_or(NAN), mtl.value_or(NAN), result.runs.size(),
              failed_runs, data.train.size(), data.eval.size(), secs)};
}

// --- fisheye ---------------------------------------------------------------

// Distorted image of straight lines a*x + b*y = c in rectified pixels,
// drawn with a Gaussian cross-section.
struct Line {
  double a, b, c;
};

RgbImage render_lines(const DistortionModel& m, const std::vector<Line>& lines, Index w, Index h) {
  RgbImage img(w, h);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const Eigen::Vector2d n = m.to_normalized({static_cast<double>(x), static_cast<double>(y)});
      if (n.norm() > m.max_distorted_radius()) continue;
      const Eigen::Vector2d u = m.to_pixel(m.undistort(n));
      double v = 0;
      for (const auto& l : lines) {
        const double d = (l.a * u.x() + l.b * u.y() - l.c) / std::hypot(l.a, l.b);
        v = std::max(v, std::exp(-d * d / (2 * 1.2 * 1.2)));
      }
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(255 * v));
    }
  }
  return img;
}

// Column-wise intensity centroids of a roughly horizontal line inside a band
// around row `guess`, then the largest residual from a least-squares fit.
double horizontal_line_deviation(const RgbImage& img, const std::vector<std::uint8_t>* valid, double guess,
                                 double band, Index x_lo, Index x_hi) {
  std::vector<double> xs, ys;
  for (Index x = x_lo; x <= x_hi; ++x) {
    double sw = 0, sy = 0;
    bool complete = true;
    for (Index y = std::max<Index>(0, std::lround(guess - band)); y <= std::min<Index>(img.height - 1, std::lround(guess + band)); ++y) {
      if (valid && !(*valid)[y * img.width + x]) complete = false;
      const double v = img.at(x, y, 0);
      sw += v;
      sy += v * static_cast<double>(y);
    }
    if (complete && sw > 255) {
      xs.push_back(static_cast<double>(x));
      ys.push_back(sy / sw);
    }
  }
  if (xs.size() < 10) return INFINITY;
  Eigen::MatrixXd a(xs.size(), 2);
  Eigen::VectorXd b(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    a(i, 0) = xs[i];
    a(i, 1) = 1;
    b(i) = ys[i];
  }
  const Eigen::Vector2d fit = a.colPivHouseholderQr().solve(b);
  return (a * fit - b).cwiseAbs().maxCoeff();
}

Outcome fisheye() {
  const auto model = load_distortion_model(kSourceDir / "configs" / "fisheye.json");
  Rng rng(42);
  double round_trip = 0;
  for (int i = 0; i < 1000; ++i) {
    const double r = model.params().max_valid_radius * std::sqrt(rng.uniform());
    const double t = rng.uniform(0, 2 * M_PI);
    const Eigen::Vector2d p(r * std::cos(t), r * std::sin(t));
    round_trip = std::max(round_trip, (model.undistort(model.distort(p)) - p).norm());
  }

  const Index w = 128, h = 96;
  // Horizontal lines through the upper half, centre and lower half.
  const std::vector<double> rows{28, 47.5, 70};
  std::vector<Line> lines;
  for (double r : rows) lines.push_back({0.02, 1, r + 0.02 * 63.5});
  const auto distorted = render_lines(model, lines, w, h);
  const auto map = build_rectify_map(model, w, h, w, h);
  const auto rectified = map.apply(distorted);
  double straight = 0, bent = 0;
  for (double r : rows) {
    straight = std::max(straight, horizontal_line_deviation(rectified, &map.valid, r, 5, 16, w - 17));
    // The same line in the distorted image, for contrast.
    const Eigen::Vector2d mid = model.to_pixel(model.distort(model.to_normalized({63.5, r})));
    bent = std::max(bent, horizontal_line_deviation(distorted, nullptr, mid.y(), 9, 16, w - 17));
  }
  return {round_trip < 1e-8 && straight < 0.5,
          fmt("round trip max %.2g (< 1e-8, 1000 points); rectified line deviation %.3f px (< 0.5), "
              "unrectified %.2f px",
              round_trip, straight, bent)};
}

// --- cost knobs ------------------------------------------------------------

Outcome cost_knobs() {
  ModelSpec full;
  ModelSpec half = full;
  half.width_mult = 0.5;
  const double ratio = static_cast<double>(count_macs(half).total_macs) / count_macs(full).total_macs;

  bool skips_ok = true;
  std::string skip_detail;
  for (int s : {8, 16}) {
    ModelSpec fewer = full;
    fewer.skip_strides.erase(s);
    const Index before = count_macs(full).total_macs, after = count_macs(fewer).total_macs;
    skips_ok = skips_ok && after < before;
    skip_detail += fmt("without s%d %.3f GMAC; ", s, after / 1e9);
  }

  ModelSpec quarter = full;
  quarter.width_mult = 0.25;
  const auto slow = measure_fps(full, 3, 1);
  const auto fast = measure_fps(quarter, 3, 1);
  return {ratio <= 0.35 && skips_ok && fast.fps > slow.fps,
          fmt("MAC ratio 0.5/1.0 = %.3f (<= 0.35); full %.3f GMAC; ", ratio, count_macs(full).total_macs / 1e9) +
              skip_detail +
              fmt("fps at 1280x384: width 0.25 %.2f > width 1.0 %.2f (3 runs, %d thread)", fast.fps, slow.fps,
                  slow.threads)};
}

// --- determinism -----------------------------------------------------------

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mtlnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

nlohmann::json manifest_outputs(const fs::path& out) {
  std::ifstream f(out / "manifest.json");
  const auto j = nlohmann::json::parse(f);
  if (j.at("status") != "ok") throw std::runtime_error(out.string() + ": run did not succeed");
  return j.at("outputs");
}

Outcome determinism() {
  const fs::path root = fresh_dir("determinism");
  const std::string cfg = (kSourceDir / "configs").string();
  // Inputs shared by the replayed commands.
  const fs::path work = root / "inputs";
  fs::create_directories(work);
  {
    nlohmann::json exp = nlohmann::json::parse(read_file_bytes(kSourceDir / "configs" / "experiment_mtl.json"));
    exp["optimizer"]["steps"] = 12;
    exp["train_scene"]["count"] = 12;
    exp["eval_scene"] = {{"config", {{"seed", 4}}}, {"count", 6}};
    std::ofstream(work / "exp.json") << exp.dump(2);
  }
  if (run_cli({"train", "--config", (work / "exp.json").string(), "--out", (work / "model").string(), "--threads", "1"}))
    return {false, "could not prepare a checkpoint"};
  if (run_cli({"generate", "--count", "2", "--config", cfg + "/scene_fisheye.json", "--out", (work / "fish").string(),
               "--threads", "1"}))
    return {false, "could not prepare fisheye images"};

  struct Command {
    std::string name;
    std::vector<std::string> args;
  };
  const std::string ckpt = (work / "model" / "final.mtlw").string();
  const std::vector<Command> commands{
      {"generate", {"generate", "--count", "24", "--config", cfg + "/scene.json", "--seed", "7"}},
      {"train", {"train", "--config", (work / "exp.json").string(), "--seed", "3"}},
      {"eval", {"eval", "--config", (work / "exp.json").string(), "--checkpoint", ckpt}},
      {"infer",
       {"infer", "--model", (work / "model" / "model.json").string(), "--checkpoint", ckpt,
        (work / "fish" / "images" / "000000.ppm").string(), (work / "fish" / "images" / "000001.ppm").string()}},
      {"rectify", {"rectify", "--model", cfg + "/fisheye.json", (work / "fish" / "images" / "000000.ppm").string(),
                   "rectified.ppm"}},
      {"gradcheck", {"gradcheck", "--seeds", "1"}},
      {"study", {"study", "--config", cfg + "/study_smoke.json"}},
  };
  bool ok = true;
  std::string detail;
  for (const auto& c : commands) {
    nlohmann::json outputs[2];
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path out = root / (c.name + std::to_string(rep));
      auto args = c.args;
      args.insert(args.end(), {"--out", out.string(), "--threads", rep ? "3" : "1"});
      if (const int code = run_cli(args); code != 0) {
        ok = false;
        detail += c.name + " exited " + std::to_string(code) + "; ";
        break;
      }
      outputs[rep] = manifest_outputs(out);
    }
    const bool same = outputs[0] == outputs[1] && !outputs[0].empty();
    ok = ok && same;
    detail += fmt("%s %zu files %s; ", c.name.c_str(), outputs[0].size(), same ? "identical" : "DIFFER");
  }
  return {ok, detail + "threads 1 vs 3, compared by git blob SHA-1"};
}

const std::vector<std::pair<std::string, std::function<Outcome()>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Outcome()>>> list{
      {"gradients", gradients}, {"oracles", oracles},       {"linearity", linearity},
      {"overfit", overfit},     {"study", study},           {"fisheye", fisheye},
      {"cost_knobs", cost_knobs}, {"determinism", determinism},
  };
  return list;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> wanted(argv + 1, argv + argc);
  bool all_pass = true;
  for (const auto& [name, fn] : criteria()) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  return all_pass ? 0 : 1;
}
