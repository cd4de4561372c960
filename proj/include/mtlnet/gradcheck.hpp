#pragma once

// Central finite-difference checks of reverse-mode gradients, in double.

#include "mtlnet/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mtlnet {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  int seeds = 20;  // random instances per op
  std::uint64_t base_seed = 0;
};

struct GradCheckResult {
  std::string name;
  Index entries = 0;        // perturbed input values
  Index one_sided = 0;      // entries with a relu/maxpool branch switch within one step
  Index excluded = 0;       // switches on both sides within two steps; left out
  double max_rel_err = 0;   // worst input tensor
  bool passed = false;
};

// Compares the backward pass of `loss` against (f(v+h) - f(v-h)) / 2h for
// every entry of every input. When a relu or maxpool branch switch lies
// within h (BranchProbe), the second-order one-sided difference on the
// unswitched side is used instead. The error of one input tensor is
// ||analytic - numeric|| / max(||analytic||, ||numeric||), or 0 when both
// vanish; the result reports the worst input. Passing also requires at most
// one excluded entry per thousand.
GradCheckResult check_gradients(const std::string& name, const std::vector<Tensor<double>>& inputs,
                                const std::function<Tensor<double>()>& loss, const GradCheckOptions& opts);

// Segmentation + detection network small enough for exhaustive checks.
ModelSpec micro_spec();

// Every differentiable op over opts.seeds random instances, then the whole
// micro network (train-mode batchnorm, both task losses) once.
std::vector<GradCheckResult> gradcheck_suite(const GradCheckOptions& opts = {});

}  // namespace mtlnet
