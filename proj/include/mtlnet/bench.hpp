#pragma once

// Analytic cost of a ModelSpec and wall-clock throughput of forward + postproc.

#include "mtlnet/model.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mtlnet {

struct LayerCost {
  std::string name;
  LayerKind kind = LayerKind::conv;
  Index macs = 0;
  Index params = 0;
  Index activation_bytes = 0;  // layer output, float32
};

struct Timing {
  Index runs = 0, warmup = 0;
  int threads = 1;
  std::vector<double> forward_ms, postproc_ms;
  double median_forward_ms = 0, median_postproc_ms = 0, median_total_ms = 0;
  double fps = 0;  // 1000 / median_total_ms
  bool variance_warning = false;  // set when runs < 2
  std::optional<double> horizon_fraction;
  Index processed_pixels = 0, total_pixels = 0;  // segmentation postproc, per frame
};

struct CostReport {
  ModelSpec spec;
  Index batch = 1;
  std::vector<LayerCost> layers;
  Index total_macs = 0, total_params = 0, total_activation_bytes = 0;
  std::optional<Timing> timing;
};

// Conv: N*O*H'*W'*C*k*k. Deconv: N*C_in*H*W*C_out*k*k. BatchNorm: 0 MACs.
CostReport count_macs(const ModelSpec& spec, Index batch = 1);

// Median ms/frame over `runs` timed runs after `warmup` untimed ones, on a
// random input at the spec's input size. Postproc is seg argmax (horizon
// restricted when given) plus box decoding and NMS.
Timing measure_fps(const ModelSpec& spec, Index runs, Index warmup,
                   std::optional<double> horizon_fraction = {}, std::uint64_t seed = 0);

nlohmann::json cost_json(const CostReport& report);
void print_cost_table(std::ostream& os, const CostReport& report);

}  // namespace mtlnet
