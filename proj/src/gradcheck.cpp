#include "mtlnet/gradcheck.hpp"

#include "mtlnet/loss.hpp"
#include "mtlnet/rng.hpp"

#include <cmath>
#include <numeric>

namespace mtlnet {

GradCheckResult check_gradients(const std::string& name, const std::vector<Tensor<double>>& inputs,
                                const std::function<Tensor<double>()>& loss, const GradCheckOptions& opts) {
  GradCheckResult r;
  r.name = name;
  for (auto t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  BranchProbe probe;
  const Tensor<double> base = loss();
  const std::uint64_t branch = probe.fingerprint();
  const double f0 = base.item();
  base.backward();
  std::vector<Buffer<double>> analytic;
  for (const auto& t : inputs) {
    analytic.push_back(t.has_grad() ? t.grad() : Buffer<double>::Zero(t.numel()));
  }

  NoGradGuard no_grad;
  // Loss at an offset, and whether it stayed on the base point's branch.
  auto eval = [&](Buffer<double>& v, Index i, double orig, double offset) {
    v[i] = orig + offset;
    probe.reset();
    const double f = loss().item();
    v[i] = orig;
    return std::pair{f, probe.fingerprint() == branch};
  };
  const double h = opts.step;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double> t = inputs[k];
    Buffer<double>& v = t.mutable_data();
    Buffer<double> numeric(v.size());
    std::vector<bool> used(v.size(), true);
    for (Index i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      const auto [up, up_same] = eval(v, i, orig, h);
      const auto [down, down_same] = eval(v, i, orig, -h);
      if (up_same && down_same) {
        numeric[i] = (up - down) / (2 * h);
        continue;
      }
      // A branch switch lies within h: second-order one-sided difference
      // on the side that stays on the branch.
      ++r.one_sided;
      if (up_same) {
        const auto [up2, same2] = eval(v, i, orig, 2 * h);
        if (same2) {
          numeric[i] = (-3 * f0 + 4 * up - up2) / (2 * h);
          continue;
        }
      }
      if (down_same) {
        const auto [down2, same2] = eval(v, i, orig, -2 * h);
        if (same2) {
          numeric[i] = (3 * f0 - 4 * down + down2) / (2 * h);
          continue;
        }
      }
      used[i] = false;
      ++r.excluded;
    }
    double num2 = 0, ana2 = 0, diff2 = 0;
    for (Index i = 0; i < v.size(); ++i) {
      if (!used[i]) continue;
      num2 += numeric[i] * numeric[i];
      ana2 += analytic[k][i] * analytic[k][i];
      diff2 += (numeric[i] - analytic[k][i]) * (numeric[i] - analytic[k][i]);
    }
    r.entries += v.size();
    const double denom = std::sqrt(std::max(num2, ana2));
    r.max_rel_err = std::max(r.max_rel_err, denom > 0 ? std::sqrt(diff2) / denom : 0.0);
  }
  for (auto t : inputs) t.zero_grad();
  r.passed = r.max_rel_err < opts.tolerance && r.excluded <= r.entries / 1000;
  return r;
}

ModelSpec micro_spec() {
  ModelSpec s;
  s.input_height = 64;
  s.input_width = 64;
  s.base_widths = {4, 4, 4, 4};
  s.min_channels = 4;
  s.stem_kernel = 3;
  s.anchors = {{1.0, 1.0}};
  return s;
}

namespace {

Tensor<double> uniform_tensor(Rng& rng, const Shape& shape, double lo = -1, double hi = 1) {
  Buffer<double> b(numel_of(shape));
  for (Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(lo, hi);
  return Tensor<double>(shape, std::move(b), true);
}

// Values at least 0.05 away from zero.
Tensor<double> off_kink_tensor(Rng& rng, const Shape& shape) {
  Buffer<double> b(numel_of(shape));
  for (Index i = 0; i < b.size(); ++i) b[i] = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.05, 1.0);
  return Tensor<double>(shape, std::move(b), true);
}

// Distinct values with gaps of at least 0.015, so no window max changes
// under a finite-difference step.
Tensor<double> distinct_tensor(Rng& rng, const Shape& shape) {
  const Index n = numel_of(shape);
  std::vector<Index> perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
  Buffer<double> b(n);
  for (Index i = 0; i < n; ++i) b[i] = double(perm[i]) * 0.02 + rng.uniform(0, 0.005) - 0.01 * double(n);
  return Tensor<double>(shape, std::move(b), true);
}

// Scalar probe: <op output, fixed random weights>.
Tensor<double> probe(const Tensor<double>& y, const Tensor<double>& r) { return sum(mul(y, r)); }

Tensor<double> fixed_like(Rng& rng, const Shape& shape) {
  Tensor<double> t = uniform_tensor(rng, shape);
  t.set_requires_grad(false);
  return t;
}

std::vector<std::uint8_t> random_labels(Rng& rng, Index n, int classes, bool with_ignore) {
  std::vector<std::uint8_t> labels(n);
  for (auto& l : labels) {
    l = static_cast<std::uint8_t>(rng.uniform_int(0, classes - 1));
    if (with_ignore && rng.uniform() < 0.1) l = kIgnoreLabel;
  }
  return labels;
}

std::vector<std::vector<GtBox>> random_boxes(Rng& rng, Index batch, int classes, int per_image,
                                             double min_size = 0.05, double max_size = 0.5) {
  std::vector<std::vector<GtBox>> gt(batch);
  for (auto& boxes : gt) {
    for (int i = 0; i < per_image; ++i) {
      boxes.push_back({static_cast<int>(rng.uniform_int(0, classes - 1)), rng.uniform(0.1, 0.9),
                       rng.uniform(0.1, 0.9), rng.uniform(min_size, max_size), rng.uniform(min_size, max_size)});
    }
  }
  return gt;
}

using Case = std::function<GradCheckResult(Rng&, const std::string&, const GradCheckOptions&)>;

GradCheckResult conv_case(Rng& rng, const std::string& name, const GradCheckOptions& o, Index k, Index s,
                          Index p, bool bias) {
  ConvSpec cs{3, 4, {k, k}, {s, s}, {p, p}, bias};
  auto x = uniform_tensor(rng, {2, 3, 9, 8});
  auto w = uniform_tensor(rng, {4, 3, k, k});
  Tensor<double> b = bias ? uniform_tensor(rng, {4}) : Tensor<double>();
  const auto out = cs.output_size(9, 8);
  auto r = fixed_like(rng, {2, 4, out[0], out[1]});
  std::vector<Tensor<double>> in{x, w};
  if (bias) in.push_back(b);
  return check_gradients(name, in, [=] { return probe(conv2d(x, w, b, cs), r); }, o);
}

GradCheckResult deconv_case(Rng& rng, const std::string& name, const GradCheckOptions& o, Index s, Index k) {
  auto x = uniform_tensor(rng, {2, 3, 3, 4});
  auto w = uniform_tensor(rng, {3, 2, k, k});
  auto r = fixed_like(rng, {2, 2, 3 * s, 4 * s});
  return check_gradients(name, {x, w}, [=] { return probe(deconv2d(x, w, s), r); }, o);
}

GradCheckResult bn_case(Rng& rng, const std::string& name, const GradCheckOptions& o, BatchNormMode mode) {
  auto x = uniform_tensor(rng, {3, 4, 3, 5});
  auto gamma = uniform_tensor(rng, {4}, 0.5, 1.5);
  auto beta = uniform_tensor(rng, {4});
  auto rm = fixed_like(rng, {4});
  Tensor<double> rv = uniform_tensor(rng, {4}, 0.5, 2.0);
  rv.set_requires_grad(false);
  auto r = fixed_like(rng, {3, 4, 3, 5});
  return check_gradients(name, {x, gamma, beta}, [=] {
    BatchNormState<double> st{rm, rv};
    return probe(batchnorm2d(x, gamma, beta, st, mode), r);
  }, o);
}

GradCheckResult maxpool_case(Rng& rng, const std::string& name, const GradCheckOptions& o, Index k, Index s,
                             Index p) {
  auto x = distinct_tensor(rng, {2, 3, 7, 8});
  Shape out;
  {
    NoGradGuard g;
    out = maxpool2d(x, k, s, p).shape();
  }
  auto r = fixed_like(rng, out);
  return check_gradients(name, {x}, [=] { return probe(maxpool2d(x, k, s, p), r); }, o);
}

GradCheckResult seg_loss_case(Rng& rng, const std::string& name, const GradCheckOptions& o, bool masked) {
  auto logits = uniform_tensor(rng, {2, 3, 5, 6}, -3, 3);
  const auto labels = random_labels(rng, 2 * 5 * 6, 3, true);
  std::vector<std::uint8_t> valid;
  if (masked) {
    valid.resize(labels.size());
    for (auto& v : valid) v = rng.uniform() < 0.7;
  }
  return check_gradients(name, {logits}, [=] {
    return seg_loss(logits, std::span<const std::uint8_t>(labels), std::span<const std::uint8_t>(valid));
  }, o);
}

GradCheckResult det_loss_case(Rng& rng, const std::string& name, const GradCheckOptions& o) {
  const std::vector<Anchor> anchors{{1.0, 1.0}, {2.0, 1.5}};
  const Index classes = 3, gh = 3, gw = 4;
  const auto targets = assign_targets(random_boxes(rng, 2, classes, 3), gh, gw, anchors, classes);
  auto raw = uniform_tensor(rng, {2, 2 * (5 + classes), gh, gw}, -2, 2);
  return check_gradients(name, {raw}, [=] { return det_loss(raw, targets); }, o);
}

std::vector<std::pair<std::string, Case>> op_cases() {
  using B = BatchNormMode;
  std::vector<std::pair<std::string, Case>> c;
  auto add_case = [&](std::string n, Case f) { c.emplace_back(std::move(n), std::move(f)); };
  add_case("conv2d 3x3 s1 p1 bias", [](Rng& g, auto& n, auto& o) { return conv_case(g, n, o, 3, 1, 1, true); });
  add_case("conv2d 3x3 s2 p1", [](Rng& g, auto& n, auto& o) { return conv_case(g, n, o, 3, 2, 1, false); });
  add_case("conv2d 1x1 s2", [](Rng& g, auto& n, auto& o) { return conv_case(g, n, o, 1, 2, 0, true); });
  add_case("conv2d 5x5 s2 p2", [](Rng& g, auto& n, auto& o) { return conv_case(g, n, o, 5, 2, 2, false); });
  add_case("deconv2d s2 k4", [](Rng& g, auto& n, auto& o) { return deconv_case(g, n, o, 2, 4); });
  add_case("deconv2d s4 k8", [](Rng& g, auto& n, auto& o) { return deconv_case(g, n, o, 4, 8); });
  add_case("deconv2d s2 k2", [](Rng& g, auto& n, auto& o) { return deconv_case(g, n, o, 2, 2); });
  add_case("batchnorm2d train", [](Rng& g, auto& n, auto& o) { return bn_case(g, n, o, B::train); });
  add_case("batchnorm2d eval", [](Rng& g, auto& n, auto& o) { return bn_case(g, n, o, B::eval); });
  add_case("relu", [](Rng& g, auto& n, auto& o) {
    auto x = off_kink_tensor(g, {2, 3, 4, 5});
    auto r = fixed_like(g, {2, 3, 4, 5});
    return check_gradients(n, {x}, [=] { return probe(relu(x), r); }, o);
  });
  add_case("maxpool2d 3/2/1", [](Rng& g, auto& n, auto& o) { return maxpool_case(g, n, o, 3, 2, 1); });
  add_case("maxpool2d 2/2/0", [](Rng& g, auto& n, auto& o) { return maxpool_case(g, n, o, 2, 2, 0); });
  add_case("add", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 4, 5}), y = uniform_tensor(g, {2, 3, 4, 5});
    auto r = fixed_like(g, {2, 3, 4, 5});
    return check_gradients(n, {x, y}, [=] { return probe(add(x, y), r); }, o);
  });
  add_case("mul", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 4, 5}), y = uniform_tensor(g, {2, 3, 4, 5});
    auto r = fixed_like(g, {2, 3, 4, 5});
    return check_gradients(n, {x, y}, [=] { return probe(mul(x, y), r); }, o);
  });
  add_case("scale", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 4, 5});
    auto r = fixed_like(g, {2, 3, 4, 5});
    const double f = g.uniform(-3, 3);
    return check_gradients(n, {x}, [=] { return probe(scale(x, f), r); }, o);
  });
  add_case("concat_channels", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 4, 5}), y = uniform_tensor(g, {2, 2, 4, 5});
    auto r = fixed_like(g, {2, 5, 4, 5});
    return check_gradients(n, {x, y}, [=] { return probe(concat_channels(x, y), r); }, o);
  });
  add_case("softmax", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 4, 3, 5}, -3, 3);
    auto r = fixed_like(g, {2, 4, 3, 5});
    return check_gradients(n, {x}, [=] { return probe(softmax(x, 1), r); }, o);
  });
  add_case("sigmoid", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 4, 5}, -4, 4);
    auto r = fixed_like(g, {2, 3, 4, 5});
    return check_gradients(n, {x}, [=] { return probe(sigmoid(x), r); }, o);
  });
  add_case("exp", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 4, 5}, -2, 2);
    auto r = fixed_like(g, {2, 3, 4, 5});
    return check_gradients(n, {x}, [=] { return probe(exp(x), r); }, o);
  });
  add_case("sum", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 4, 5});
    return check_gradients(n, {x}, [=] { return sum(mul(x, x)); }, o);
  });
  add_case("mean", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 4, 5});
    return check_gradients(n, {x}, [=] { return mean(mul(x, x)); }, o);
  });
  add_case("slice_rows", [](Rng& g, auto& n, auto& o) {
    auto x = uniform_tensor(g, {2, 3, 6, 5});
    const Index b = g.uniform_int(0, 3), e = g.uniform_int(b + 1, 6);
    auto r = fixed_like(g, {2, 3, e - b, 5});
    return check_gradients(n, {x}, [=] { return probe(slice_rows(x, b, e), r); }, o);
  });
  add_case("seg_loss", [](Rng& g, auto& n, auto& o) { return seg_loss_case(g, n, o, false); });
  add_case("seg_loss masked", [](Rng& g, auto& n, auto& o) { return seg_loss_case(g, n, o, true); });
  add_case("det_loss", [](Rng& g, auto& n, auto& o) { return det_loss_case(g, n, o); });
  add_case("mtl_loss", [](Rng& g, auto& n, auto& o) {
    auto s = uniform_tensor(g, {1}, 0, 2), d = uniform_tensor(g, {1}, 0, 2);
    const LossWeights w{g.uniform(0, 10), g.uniform(0, 10)};
    return check_gradients(n, {s, d}, [=] { return mtl_loss(sum(mul(s, s)), sum(mul(d, d)), w); }, o);
  });
  return c;
}

// conv-BN-ReLU-maxpool-conv segmenter with under 1000 parameters.
GradCheckResult tiny_cnn_case(const GradCheckOptions& o) {
  Rng rng = Rng::keyed(o.base_seed, 0x6772616463ULL, 1000);
  auto x = uniform_tensor(rng, {2, 3, 8, 8});
  x.set_requires_grad(false);
  auto w1 = uniform_tensor(rng, {6, 3, 3, 3}, -0.5, 0.5);
  auto gamma = uniform_tensor(rng, {6}, 0.5, 1.5);
  auto beta = uniform_tensor(rng, {6}, -0.2, 0.2);
  auto w2 = uniform_tensor(rng, {3, 6, 3, 3}, -0.5, 0.5);
  auto b2 = uniform_tensor(rng, {3});
  auto wd = uniform_tensor(rng, {3, 3, 4, 4}, -0.5, 0.5);
  const auto labels = random_labels(rng, 2 * 8 * 8, 3, false);
  Tensor<double> rm = Tensor<double>::zeros({6}), rv = Tensor<double>::full({6}, 1.0);
  const ConvSpec c1{3, 6, {3, 3}, {1, 1}, {1, 1}, false}, c2{6, 3, {3, 3}, {1, 1}, {1, 1}, true};
  return check_gradients("tiny cnn", {w1, gamma, beta, w2, b2, wd}, [=] {
    BatchNormState<double> st{rm, rv};
    auto h = relu(batchnorm2d(conv2d(x, w1, Tensor<double>(), c1), gamma, beta, st, BatchNormMode::train));
    auto logits = deconv2d(conv2d(maxpool2d(h, 2, 2), w2, b2, c2), wd, 2);
    return seg_loss(logits, std::span<const std::uint8_t>(labels));
  }, o);
}

GradCheckResult micro_net_case(const GradCheckOptions& o) {
  const ModelSpec spec = micro_spec();
  ModelParams<double> params = build<double>(spec, o.base_seed);
  Rng rng = Rng::keyed(o.base_seed, 0x6772616463ULL, 1001);
  const Index n = 2;
  auto x = uniform_tensor(rng, {n, 3, spec.input_height, spec.input_width}, 0, 1);
  x.set_requires_grad(false);
  const auto labels = random_labels(rng, n * spec.input_height * spec.input_width, 3, true);
  // Box sizes near the single anchor keep the loss, and so the rounding
  // noise of its finite differences, small.
  const auto targets = assign_targets(random_boxes(rng, n, 3, 2, 0.3, 0.7), spec.input_height / 32, spec.input_width / 32,
                                      spec.anchors, 3);
  std::vector<Tensor<double>> inputs;
  for (const auto& name : params.trainable_names()) inputs.push_back(params.at(name));
  return check_gradients("micro network", inputs, [&params, spec, x, labels, targets] {
    const auto feats = forward_encoder(params, spec, x, BatchNormMode::train);
    const auto seg = seg_loss(forward_seg(params, spec, feats), std::span<const std::uint8_t>(labels));
    const auto det = det_loss(forward_det(params, spec, feats, BatchNormMode::train), targets);
    return mtl_loss(seg, det, LossWeights{1, 1});
  }, o);
}

}  // namespace

std::vector<GradCheckResult> gradcheck_suite(const GradCheckOptions& opts) {
  std::vector<GradCheckResult> out;
  std::uint64_t case_index = 0;
  for (const auto& [name, fn] : op_cases()) {
    GradCheckResult agg;
    agg.name = name;
    agg.passed = true;
    for (int s = 0; s < opts.seeds; ++s) {
      Rng rng = Rng::keyed(opts.base_seed, case_index, static_cast<std::uint64_t>(s));
      const GradCheckResult r = fn(rng, name, opts);
      agg.entries += r.entries;
      agg.one_sided += r.one_sided;
      agg.excluded += r.excluded;
      agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
      agg.passed = agg.passed && r.passed;
    }
    out.push_back(agg);
    ++case_index;
  }
  out.push_back(tiny_cnn_case(opts));
  out.push_back(micro_net_case(opts));
  return out;
}

}  // namespace mtlnet
