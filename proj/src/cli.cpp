#include "mtlnet/cli.hpp"

#include "mtlnet/bench.hpp"
#include "mtlnet/fisheye.hpp"
#include "mtlnet/gradcheck.hpp"
#include "mtlnet/hash.hpp"
#include "mtlnet/postproc.hpp"
#include "mtlnet/train.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtlnet {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return json::parse(is);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

// WxH, e.g. 1280x384.
std::pair<Index, Index> parse_size(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw UsageError("size must look like WIDTHxHEIGHT, got '" + s + "'");
  try {
    return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw UsageError("size must look like WIDTHxHEIGHT, got '" + s + "'");
  }
}

class Manifest {
 public:
  Manifest(fs::path out, std::string command, std::vector<std::string> argv)
      : out_(std::move(out)) {
    j_ = {{"schema", "mtlnet.manifest/1"},
          {"tool_version", kToolVersion},
          {"command", std::move(command)},
          {"argv", std::move(argv)},
          {"status", "running"},
          {"start_time", utc_now()},
          {"threads", num_threads()},
          {"inputs", json::object()}};
  }

  void config(const json& c) { j_["config"] = c; }
  void seed(std::uint64_t s) { j_["seed"] = s; }
  void dtype(const std::string& d) { j_["dtype"] = d; }
  void input(const fs::path& p) { j_["inputs"][p.string()] = file_git_sha1(p); }

  void begin() {
    fs::create_directories(out_);
    json inputs = j_["inputs"];
    std::string listing;
    for (auto it = inputs.begin(); it != inputs.end(); ++it) {
      listing += it.key() + ' ' + it.value().get<std::string>() + '\n';
    }
    j_["inputs_sha1"] = git_blob_sha1(listing);
    write_json(out_ / "manifest.json", j_);
  }

  void finish(int exit_code, const std::string& error = {}) {
    j_["status"] = exit_code == 0 ? "ok" : "failed";
    j_["exit_code"] = exit_code;
    if (!error.empty()) j_["error"] = error;
    j_["end_time"] = utc_now();
    json outputs = json::object();
    if (fs::exists(out_)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(out_)) {
        if (e.is_regular_file() && e.path() != out_ / "manifest.json") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) outputs[fs::relative(f, out_).generic_string()] = file_git_sha1(f);
    }
    j_["outputs"] = outputs;
    fs::create_directories(out_);
    write_json(out_ / "manifest.json", j_);
  }

 private:
  fs::path out_;
  json j_;
};

struct Common {
  std::string config, out, dtype = "f32";
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

void add_common(CLI::App* sub, Common& c, bool with_config, bool with_seed, bool out_required) {
  if (with_config) sub->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  auto* out = sub->add_option("--out", c.out, "output directory (nothing is written outside it)");
  if (out_required) out->required();
  if (with_seed) sub->add_option("--seed", c.seed, "random seed");
  sub->add_option("--threads", c.threads, "worker threads (default: all cores; bench: 1)")
      ->envname("MTLNET_THREADS")
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--dtype", c.dtype, "scalar type")->check(CLI::IsMember({"f32", "f64"}));
}

template <typename Scalar>
ModelParams<Scalar> load_params(const fs::path& checkpoint, const ModelSpec& spec) {
  ModelParams<Scalar> p = load_checkpoint<Scalar>(checkpoint);
  check_inventory(p, spec);
  return p;
}

json metrics_json(const EvalResult& r, const ModelSpec& spec) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };
  json j = {{"schema", "mtlnet.metrics/1"}};
  if (r.seg) {
    json per = json::object();
    for (std::size_t k = 0; k < spec.seg_classes.size(); ++k) per[spec.seg_classes[k]] = opt(r.seg->per_class[k]);
    j["seg"] = {{"iou", per}, {"mean_iou", opt(r.seg->mean)}};
  }
  if (r.det) {
    json per = json::object();
    for (std::size_t k = 0; k < spec.det_classes.size(); ++k) per[spec.det_classes[k]] = opt(r.det->per_class[k]);
    j["det"] = {{"ap", per}, {"mean_ap", opt(r.det->mean)}};
  }
  return j;
}

// ---------------------------------------------------------------------------

int run_generate(const Common& c, Index count, Manifest& m) {
  SceneConfig scene;
  if (!c.config.empty()) {
    scene = read_json(c.config).get<SceneConfig>();
    m.input(c.config);
  }
  if (c.seed) scene.seed = *c.seed;
  scene.validate();
  m.config({{"scene", scene}, {"count", count}});
  m.seed(scene.seed);
  m.begin();
  const DatasetMeta meta = write_dataset(c.out, scene, count);
  std::cout << "wrote " << meta.count << " samples to " << c.out << " (" << meta.dropped_objects
            << " objects could not be placed)\n";
  return 0;
}

ExperimentConfig experiment_from(const Common& c, Manifest& m) {
  if (c.config.empty()) throw UsageError("--config is required");
  ExperimentConfig exp = read_json(c.config).get<ExperimentConfig>();
  m.input(c.config);
  for (const auto& dir : {exp.train_data, exp.eval_data}) {
    if (!dir.empty()) m.input(dir / "meta.json");
  }
  return exp;
}

template <typename Scalar>
int run_train(const Common& c, std::optional<Index> steps, Manifest& m) {
  ExperimentConfig exp = experiment_from(c, m);
  if (c.seed) exp.optimizer.seed = *c.seed;
  if (steps) exp.optimizer.steps = *steps;
  exp.validate();
  m.config(exp);
  m.seed(exp.optimizer.seed);
  m.begin();
  const ExperimentData data = load_experiment_data(exp, fs::path(c.out) / "data");
  const TrainResult r = train<Scalar>(exp, data.train, data.eval, c.out);
  const auto& last = r.evals.back().second;
  write_json(fs::path(c.out) / "metrics.json", metrics_json(last, exp.model));
  std::cout << metrics_json(last, exp.model).dump(2) << '\n';
  return 0;
}

template <typename Scalar>
int run_eval(const Common& c, const std::string& checkpoint, Manifest& m) {
  ExperimentConfig exp = experiment_from(c, m);
  m.input(checkpoint);
  m.config(exp);
  m.begin();
  const ExperimentData data = load_experiment_data(exp, fs::path(c.out) / "data");
  ModelParams<Scalar> params = load_params<Scalar>(checkpoint, exp.model);
  EvalOptions opts = exp.eval;
  if (exp.horizon_fraction) opts.horizon_fraction = exp.horizon_fraction;
  const EvalResult r = evaluate(params, exp.model, data.eval.empty() ? data.train : data.eval, opts);
  const json j = metrics_json(r, exp.model);
  write_json(fs::path(c.out) / "metrics.json", j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

struct InferOptions {
  std::string model, checkpoint;
  std::vector<std::string> images;
  double score_thresh = 0.25, nms_iou = 0.45;
  std::optional<double> horizon;
};

template <typename Scalar>
int run_infer(const Common& c, const InferOptions& o, Manifest& m) {
  const ModelSpec spec = load_model_spec(o.model);
  m.input(o.model);
  m.input(o.checkpoint);
  for (const auto& img : o.images) m.input(img);
  m.config({{"model", spec},
            {"score_thresh", o.score_thresh},
            {"nms_iou", o.nms_iou},
            {"horizon_fraction", o.horizon ? json(*o.horizon) : json()}});
  m.begin();
  ModelParams<Scalar> params = load_params<Scalar>(o.checkpoint, spec);
  const Index h = spec.input_height, w = spec.input_width;
  std::optional<Index> horizon;
  if (o.horizon) horizon = static_cast<Index>(std::floor(*o.horizon * double(h)));
  NoGradGuard no_grad;
  for (const auto& path : o.images) {
    const RgbImage original = read_ppm(path);
    const RgbImage input = original.width == w && original.height == h ? original : resize_bilinear(original, h, w);
    Tensor<Scalar> x = image_to_tensor<Scalar>(input);
    x = Tensor<Scalar>({1, 3, h, w}, x.data());
    const auto feats = forward_encoder(params, spec, x, BatchNormMode::eval);
    std::vector<Detection> dets;
    std::optional<SegMask> mask;
    if (spec.det_head) {
      auto raw = forward_det(params, spec, feats, BatchNormMode::eval);
      auto decoded = decode_boxes(raw, spec.anchors, static_cast<Index>(spec.det_classes.size()), h, w);
      dets = nms(std::move(decoded.front()), o.nms_iou, o.score_thresh);
      for (auto& d : dets) d.box = rescale_box(d.box, w, h, original.width, original.height);
    }
    if (spec.seg_head) {
      SegMask sm = seg_argmax(forward_seg(params, spec, feats), horizon).front();
      const GrayImage full = resize_nearest(sm.to_image(), original.height, original.width);
      sm.width = full.width;
      sm.height = full.height;
      sm.labels = full.pixels;
      mask = std::move(sm);
    }
    const std::string stem = fs::path(path).stem().string();
    const fs::path out(c.out);
    {
      std::ofstream os(out / (stem + ".jsonl"));
      write_detections_jsonl(os, stem, dets, spec.det_classes);
    }
    if (mask) write_pgm(out / (stem + "_mask.pgm"), mask->to_image());
    write_ppm(out / (stem + "_overlay.ppm"),
              render_overlay(original, mask ? &*mask : nullptr, dets, spec.seg_classes));
    std::cout << stem << ": " << dets.size() << " detections\n";
  }
  return 0;
}

// Output image path and the directory the command owns.
std::pair<fs::path, fs::path> rectify_paths(const std::string& out_dir, const std::string& out) {
  fs::path out_path(out);
  if (out_dir.empty()) return {out_path, fs::absolute(out_path).parent_path()};
  const fs::path root = fs::absolute(out_dir).lexically_normal();
  if (out_path.is_relative()) out_path = root / out_path;
  const auto rel = fs::absolute(out_path).lexically_normal().lexically_relative(root);
  if (rel.empty() || *rel.begin() == "..") throw UsageError("output image lies outside --out");
  return {out_path, root};
}

int run_rectify(const std::string& model_path, const std::string& in, const fs::path& out_path,
                const std::string& size, Manifest& m) {
  const DistortionModel model = load_distortion_model(model_path);
  m.input(model_path);
  m.input(in);
  const RgbImage src = read_ppm(in);
  Index ow = src.width, oh = src.height;
  if (!size.empty()) std::tie(ow, oh) = parse_size(size);
  m.config({{"model", model}, {"output_size", {ow, oh}}, {"output", out_path.string()}});
  m.begin();
  const RectifyMap map = build_rectify_map(model, src.width, src.height, ow, oh);
  write_ppm(out_path, map.apply(src));
  std::cout << "rectified " << in << " -> " << out_path.string() << " (" << map.valid_count() << " of "
            << ow * oh << " pixels valid)\n";
  return 0;
}

int run_bench(const Common& c, const std::string& spec_path, const std::string& size, Index runs, Index warmup,
              std::optional<double> horizon, Manifest& m) {
  ModelSpec spec;
  if (!spec_path.empty()) {
    spec = load_model_spec(spec_path);
    m.input(spec_path);
  }
  if (!size.empty()) {
    const auto [w, h] = parse_size(size);
    spec.input_width = w;
    spec.input_height = h;
  }
  spec.validate();
  const std::uint64_t seed = c.seed.value_or(0);
  m.config({{"spec", spec}, {"runs", runs}, {"warmup", warmup}, {"horizon_fraction", horizon ? json(*horizon) : json()}});
  m.seed(seed);
  m.begin();
  CostReport report = count_macs(spec);
  if (runs > 0) report.timing = measure_fps(spec, runs, warmup, horizon, seed);
  write_json(fs::path(c.out) / "cost.json", cost_json(report));
  print_cost_table(std::cout, report);
  return 0;
}

int run_gradcheck(const Common& c, int seeds, Manifest* m) {
  GradCheckOptions opts;
  opts.seeds = seeds;
  opts.base_seed = c.seed.value_or(0);
  if (m) {
    m->config({{"seeds", seeds}, {"step", opts.step}, {"tolerance", opts.tolerance}});
    m->seed(opts.base_seed);
    m->begin();
  }
  const auto results = gradcheck_suite(opts);
  bool ok = true;
  json rows = json::array();
  for (const auto& r : results) {
    std::printf("%-24s %9lld entries  max rel err %.3e  %s\n", r.name.c_str(), static_cast<long long>(r.entries),
                r.max_rel_err, r.passed ? "pass" : "FAIL");
    ok = ok && r.passed;
    rows.push_back({{"name", r.name},
                    {"entries", r.entries},
                    {"one_sided", r.one_sided},
                    {"excluded", r.excluded},
                    {"max_rel_err", r.max_rel_err},
                    {"passed", r.passed}});
  }
  if (m) write_json(fs::path(c.out) / "gradcheck.json", {{"schema", "mtlnet.gradcheck/1"}, {"results", rows}});
  return ok ? 0 : 2;
}

template <typename Scalar>
int run_study_cmd(const Common& c, Manifest& m) {
  if (c.config.empty()) throw UsageError("--config is required");
  const StudyConfig cfg = read_json(c.config).get<StudyConfig>();
  m.input(c.config);
  for (const auto& dir : {cfg.base.train_data, cfg.base.eval_data}) {
    if (!dir.empty()) m.input(dir / "meta.json");
  }
  m.config(cfg);
  m.begin();
  const ExperimentData data = load_experiment_data(cfg.base, fs::path(c.out) / "data");
  const StudyResult r = run_study<Scalar>(cfg, data.train, data.eval, c.out);
  write_results_csv(std::cout, r.table);
  for (const auto& run : r.runs) {
    if (!run.ok) std::cerr << run.column << " seed " << run.seed << " failed: " << run.error << '\n';
  }
  return 0;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Joint road segmentation and object detection: data, training, evaluation, benchmarks", "mtlnet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Common c;
  Index count = 0;
  std::optional<Index> steps;
  std::string checkpoint, spec_path, size, fisheye_model, rect_in, rect_out;
  Index runs = 50, warmup = 3;
  std::optional<double> horizon;
  int gc_seeds = 20;
  InferOptions infer;

  auto* gen = app.add_subcommand("generate", "render a synthetic dataset");
  add_common(gen, c, true, true, true);
  gen->add_option("--count", count, "number of samples")->required()->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "train one experiment");
  add_common(tr, c, true, true, true);
  tr->add_option("--steps", steps, "override optimizer.steps")->check(CLI::NonNegativeNumber);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, c, true, false, true);
  ev->add_option("--checkpoint", checkpoint, ".mtlw checkpoint")->required()->check(CLI::ExistingFile);

  auto* inf = app.add_subcommand("infer", "detections, label mask and overlay per image");
  add_common(inf, c, false, false, true);
  inf->add_option("--model", infer.model, "model spec JSON")->required()->check(CLI::ExistingFile);
  inf->add_option("--checkpoint", infer.checkpoint, ".mtlw checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--score-thresh", infer.score_thresh, "detection score threshold");
  inf->add_option("--nms-iou", infer.nms_iou, "NMS IoU threshold");
  inf->add_option("--horizon", infer.horizon, "skip rows above this fraction of the height");
  inf->add_option("images", infer.images, "PPM images")->required()->check(CLI::ExistingFile);

  auto* rect = app.add_subcommand("rectify", "undistort a fisheye image");
  add_common(rect, c, false, false, false);
  rect->add_option("--model", fisheye_model, "distortion model JSON")->required()->check(CLI::ExistingFile);
  rect->add_option("--size", size, "output WIDTHxHEIGHT (default: input size)");
  rect->add_option("input", rect_in, "distorted PPM")->required()->check(CLI::ExistingFile);
  rect->add_option("output", rect_out, "rectified PPM")->required();

  auto* bench = app.add_subcommand("bench", "MAC count and measured fps");
  add_common(bench, c, false, true, false);
  bench->add_option("--spec", spec_path, "model spec JSON (default: full-size model)")->check(CLI::ExistingFile);
  bench->add_option("--size", size, "input WIDTHxHEIGHT");
  bench->add_option("--runs", runs, "timed runs (0: MACs only)")->check(CLI::NonNegativeNumber);
  bench->add_option("--warmup", warmup, "untimed runs")->check(CLI::NonNegativeNumber);
  bench->add_option("--horizon", horizon, "horizon fraction for segmentation postproc");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gc, c, false, true, false);
  gc->add_option("--seeds", gc_seeds, "random instances per op")->check(CLI::PositiveNumber);

  auto* st = app.add_subcommand("study", "five-column single-task / multi-task comparison");
  add_common(st, c, true, false, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::vector<std::string> args(argv, argv + argc);
  if (c.threads > 0) {
    set_num_threads(c.threads);
  } else if (!*bench) {
    set_num_threads(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
  }
  const bool f64 = c.dtype == "f64";
  if (*bench && c.out.empty()) c.out = ".";

  std::optional<Manifest> manifest;
  Manifest* m = nullptr;
  const std::string command = app.get_subcommands().front()->get_name();
  int code = 0;
  try {
    fs::path rect_path;
    if (*rect) std::tie(rect_path, c.out) = rectify_paths(c.out, rect_out);
    if (!c.out.empty()) {
      manifest.emplace(c.out, command, args);
      manifest->dtype(c.dtype);
      m = &*manifest;
    }
    if (*gen) code = run_generate(c, count, *m);
    else if (*tr) code = f64 ? run_train<double>(c, steps, *m) : run_train<float>(c, steps, *m);
    else if (*ev) code = f64 ? run_eval<double>(c, checkpoint, *m) : run_eval<float>(c, checkpoint, *m);
    else if (*inf) code = f64 ? run_infer<double>(c, infer, *m) : run_infer<float>(c, infer, *m);
    else if (*rect) code = run_rectify(fisheye_model, rect_in, rect_path, size, *m);
    else if (*bench) code = run_bench(c, spec_path, size, runs, warmup, horizon, *m);
    else if (*gc) code = run_gradcheck(c, gc_seeds, m);
    else if (*st) code = f64 ? run_study_cmd<double>(c, *m) : run_study_cmd<float>(c, *m);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (m) m->finish(2, e.what());
    return 2;
  }
  if (m) m->finish(code, code == 0 ? "" : "checks failed");
  return code;
}

}  // namespace mtlnet
