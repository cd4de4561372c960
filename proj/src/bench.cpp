#include "mtlnet/bench.hpp"

#include "mtlnet/postproc.hpp"
#include "mtlnet/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace mtlnet {

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::deconv: return "deconv";
    case LayerKind::batchnorm: return "batchnorm";
  }
  return "?";
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

CostReport count_macs(const ModelSpec& spec, Index batch) {
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  CostReport r;
  r.spec = spec;
  r.batch = batch;
  for (const LayerInfo& l : layer_table(spec)) {
    LayerCost c{l.name, l.kind, batch * l.macs(), l.param_count(),
                batch * l.out_ch * l.out_h * l.out_w * static_cast<Index>(sizeof(float))};
    r.total_macs += c.macs;
    r.total_params += c.params;
    r.total_activation_bytes += c.activation_bytes;
    r.layers.push_back(std::move(c));
  }
  return r;
}

Timing measure_fps(const ModelSpec& spec, Index runs, Index warmup, std::optional<double> horizon_fraction,
                   std::uint64_t seed) {
  if (runs < 1 || warmup < 0) throw std::invalid_argument("runs must be >= 1 and warmup >= 0");
  ModelParams<float> params = build<float>(spec, seed);
  const Index h = spec.input_height, w = spec.input_width;
  Rng rng = Rng::keyed(seed, 0x42454e4348ULL, 0);
  Buffer<float> pixels(3 * h * w);
  for (Index i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<float>(rng.uniform());
  const Tensor<float> x({1, 3, h, w}, std::move(pixels));
  std::optional<Index> horizon;
  if (horizon_fraction) horizon = static_cast<Index>(std::floor(*horizon_fraction * double(h)));

  Timing t;
  t.runs = runs;
  t.warmup = warmup;
  t.threads = num_threads();
  t.variance_warning = runs < 2;
  t.horizon_fraction = horizon_fraction;
  t.total_pixels = spec.seg_head ? h * w : 0;
  NoGradGuard no_grad;
  for (Index r = 0; r < warmup + runs; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    const auto feats = forward_encoder(params, spec, x, BatchNormMode::eval);
    Tensor<float> logits, raw;
    if (spec.seg_head) logits = forward_seg(params, spec, feats);
    if (spec.det_head) raw = forward_det(params, spec, feats, BatchNormMode::eval);
    const double fwd = ms_since(t0);
    t0 = std::chrono::steady_clock::now();
    if (spec.seg_head) t.processed_pixels = seg_argmax(logits, horizon).front().processed_pixels;
    if (spec.det_head) {
      auto decoded = decode_boxes(raw, spec.anchors, static_cast<Index>(spec.det_classes.size()), h, w);
      nms(std::move(decoded.front()), 0.45, 0.25);
    }
    const double post = ms_since(t0);
    if (r >= warmup) {
      t.forward_ms.push_back(fwd);
      t.postproc_ms.push_back(post);
    }
  }
  std::vector<double> total(t.forward_ms.size());
  for (std::size_t i = 0; i < total.size(); ++i) total[i] = t.forward_ms[i] + t.postproc_ms[i];
  t.median_forward_ms = median_of(t.forward_ms);
  t.median_postproc_ms = median_of(t.postproc_ms);
  t.median_total_ms = median_of(total);
  t.fps = 1000.0 / t.median_total_ms;
  return t;
}

nlohmann::json cost_json(const CostReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"name", l.name},
                      {"kind", kind_name(l.kind)},
                      {"macs", l.macs},
                      {"params", l.params},
                      {"activation_bytes", l.activation_bytes}});
  }
  nlohmann::json j = {{"schema", "mtlnet.cost/1"},
                      {"spec", r.spec},
                      {"batch", r.batch},
                      {"layers", layers},
                      {"total_macs", r.total_macs},
                      {"total_params", r.total_params},
                      {"total_activation_bytes", r.total_activation_bytes}};
  if (r.timing) {
    const Timing& t = *r.timing;
    j["timing"] = {{"runs", t.runs},
                   {"warmup", t.warmup},
                   {"threads", t.threads},
                   {"forward_ms", t.forward_ms},
                   {"postproc_ms", t.postproc_ms},
                   {"median_forward_ms", t.median_forward_ms},
                   {"median_postproc_ms", t.median_postproc_ms},
                   {"median_total_ms", t.median_total_ms},
                   {"fps", t.fps},
                   {"variance_warning", t.variance_warning},
                   {"processed_pixels", t.processed_pixels},
                   {"total_pixels", t.total_pixels}};
    if (t.horizon_fraction) j["timing"]["horizon_fraction"] = *t.horizon_fraction;
  }
  return j;
}

void print_cost_table(std::ostream& os, const CostReport& r) {
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %-9s %14s %10s %12s\n", "layer", "kind", "MACs", "params", "act bytes");
  os << line;
  for (const auto& l : r.layers) {
    std::snprintf(line, sizeof line, "%-24s %-9s %14lld %10lld %12lld\n", l.name.c_str(), kind_name(l.kind),
                  static_cast<long long>(l.macs), static_cast<long long>(l.params),
                  static_cast<long long>(l.activation_bytes));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-24s %-9s %14lld %10lld %12lld\n", "total", "", static_cast<long long>(r.total_macs),
                static_cast<long long>(r.total_params), static_cast<long long>(r.total_activation_bytes));
  os << line;
  if (r.timing) {
    const Timing& t = *r.timing;
    std::snprintf(line, sizeof line, "median forward %.3f ms, postproc %.3f ms, total %.3f ms -> %.2f fps (%lld runs, %d threads)\n",
                  t.median_forward_ms, t.median_postproc_ms, t.median_total_ms, t.fps,
                  static_cast<long long>(t.runs), t.threads);
    os << line;
    if (t.variance_warning) os << "warning: a single timed run gives no variance estimate\n";
  }
}

}  // namespace mtlnet
