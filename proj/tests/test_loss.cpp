#include "mtlnet/gradcheck.hpp"
#include "mtlnet/loss.hpp"
#include "mtlnet/rng.hpp"
#include "mtlnet/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace mtlnet;

namespace {

double sig(double v) { return 1 / (1 + std::exp(-v)); }

Tensor<double> random_logits(Rng& rng, const Shape& shape, double spread = 3) {
  Buffer<double> b(numel_of(shape));
  for (Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-spread, spread);
  return Tensor<double>(shape, b);
}

std::vector<std::uint8_t> random_labels(Rng& rng, Index n, int classes) {
  std::vector<std::uint8_t> l(n);
  for (auto& v : l) v = static_cast<std::uint8_t>(rng.uniform_int(0, classes - 1));
  return l;
}

}  // namespace

TEST(SegLoss, UniformLogitsGiveLogC) {
  std::vector<std::uint8_t> labels{0, 1, 2, 1};
  EXPECT_NEAR(seg_loss(Tensor<double>::zeros({1, 3, 2, 2}), labels).item(), std::log(3.0), 1e-12);
}

TEST(SegLoss, ConfidentCorrectIsNearZero) {
  auto logits = Tensor<double>::from({1, 3, 1, 1}, {0, 1000, 0});
  std::vector<std::uint8_t> labels{1};
  EXPECT_LT(seg_loss(logits, labels).item(), 1e-6);
}

TEST(SegLoss, SinglePixelFormula) {
  auto logits = Tensor<double>::from({1, 3, 1, 1}, {1, 2, 3});
  std::vector<std::uint8_t> labels{2};
  const double expect = std::log(1 + std::exp(-1.0) + std::exp(-2.0));
  EXPECT_NEAR(seg_loss(logits, labels).item(), expect, 1e-12);
  EXPECT_NEAR(expect, 0.40761, 1e-5);
}

TEST(SegLoss, MaskedPixelsGetExactlyZeroGradient) {
  Rng rng(3);
  auto logits = random_logits(rng, {2, 3, 4, 5});
  logits.set_requires_grad(true);
  auto labels = random_labels(rng, 40, 3);
  labels[3] = kIgnoreLabel;
  labels[27] = kIgnoreLabel;
  std::vector<std::uint8_t> valid(40, 1);
  for (int i = 0; i < 5; ++i) valid[20 + i] = 0;  // image 1, row 0
  seg_loss(logits, labels, valid).backward();
  auto grad_at = [&](Index n, Index c, Index p) { return logits.grad()[(n * 3 + c) * 20 + p]; };
  for (Index c = 0; c < 3; ++c) {
    EXPECT_EQ(grad_at(0, c, 3), 0.0);
    EXPECT_EQ(grad_at(1, c, 7), 0.0);
    for (Index p = 0; p < 5; ++p) EXPECT_EQ(grad_at(1, c, p), 0.0);
    EXPECT_NE(grad_at(0, c, 4), 0.0);
  }
}

TEST(SegLoss, AllMaskedThrows) {
  std::vector<std::uint8_t> labels(4, kIgnoreLabel);
  EXPECT_THROW(seg_loss(Tensor<double>::zeros({1, 3, 2, 2}), labels), std::invalid_argument);
}

TEST(SegLoss, PixelPermutationEquivariance) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng = Rng::keyed(21, 0, seed);
    const Index hw = 12;
    auto logits = random_logits(rng, {1, 4, 3, 4});
    auto labels = random_labels(rng, hw, 4);
    std::vector<Index> perm(hw);
    std::iota(perm.begin(), perm.end(), 0);
    for (Index i = hw - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    Buffer<double> pl(logits.numel());
    std::vector<std::uint8_t> plab(hw);
    for (Index p = 0; p < hw; ++p) {
      for (Index c = 0; c < 4; ++c) pl[c * hw + p] = logits.data()[c * hw + perm[p]];
      plab[p] = labels[perm[p]];
    }
    EXPECT_NEAR(seg_loss(logits, labels).item(), seg_loss(Tensor<double>({1, 4, 3, 4}, pl), plab).item(), 1e-12);
  }
}

TEST(SegLoss, ShiftInvariantPerPixel) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng = Rng::keyed(21, 1, seed);
    auto logits = random_logits(rng, {2, 3, 2, 3});
    auto labels = random_labels(rng, 12, 3);
    Buffer<double> shifted = logits.data();
    for (Index n = 0; n < 2; ++n)
      for (Index p = 0; p < 6; ++p) {
        const double c = rng.uniform(-50, 50);
        for (Index k = 0; k < 3; ++k) shifted[(n * 3 + k) * 6 + p] += c;
      }
    EXPECT_NEAR(seg_loss(logits, labels).item(), seg_loss(Tensor<double>({2, 3, 2, 3}, shifted), labels).item(),
                1e-12);
  }
}

TEST(Assign, CellFromCenter) {
  const auto a = assign_box({0, 0.55, 0.5, 0.1, 0.1}, 3, 4, {{1, 1}});
  EXPECT_EQ(a.col, 2);
  EXPECT_EQ(a.row, 1);
}

TEST(Assign, ExactAnchorMatch) {
  // Box 2x2 grid cells on a 4x4 grid.
  EXPECT_EQ(assign_box({0, 0.5, 0.5, 0.5, 0.5}, 4, 4, {{1, 1}, {2, 2}}).anchor, 1);
}

TEST(Assign, BestShapeIou) {
  const std::vector<Anchor> anchors{{1, 1}, {2, 2}, {4, 2}};
  // Brute-force shape IoU of a 3x2 box against each anchor.
  std::vector<double> iou;
  for (const auto& a : anchors) {
    const double inter = std::min(3.0, a.w) * std::min(2.0, a.h);
    iou.push_back(inter / (6 + a.w * a.h - inter));
  }
  EXPECT_NEAR(iou[2], 0.75, 1e-15);
  EXPECT_NEAR(iou[1], 4.0 / 6, 1e-15);
  EXPECT_NEAR(iou[0], 1.0 / 6, 1e-15);
  EXPECT_EQ(assign_box({0, 0.5, 0.5, 0.75, 0.5}, 4, 4, anchors).anchor, 2);
  EXPECT_NEAR(shape_iou(3, 2, 4, 2), 0.75, 1e-15);
}

TEST(Assign, TiesPickLowestIndexAndCollisionsCounted) {
  EXPECT_EQ(assign_box({0, 0.5, 0.5, 0.25, 0.25}, 4, 4, {{2, 2}, {2, 2}}).anchor, 0);
  const auto t = assign_targets({{{0, 0.1, 0.1, 0.1, 0.1}, {1, 0.15, 0.12, 0.1, 0.1}}}, 4, 4, {{1, 1}}, 3);
  EXPECT_EQ(t.collisions, 1);
  EXPECT_EQ(t.classes[t.slot(0, 0, 0, 0)], 1);
}

TEST(Assign, TargetsEncodeOffsetsAndLogRatios) {
  const auto t = assign_targets({{{2, 0.3, 0.7, 0.5, 0.25}}}, 2, 4, {{1, 1}, {2, 0.5}}, 3);
  // Centre (1.2, 1.4) in cells, size 2 x 0.5 cells -> anchor 1 exactly.
  const Index s = t.slot(0, 1, 1, 1);
  ASSERT_TRUE(t.responsible[s]);
  EXPECT_NEAR(t.coords[s * 4 + 0], 0.2, 1e-12);
  EXPECT_NEAR(t.coords[s * 4 + 1], 0.4, 1e-12);
  EXPECT_NEAR(t.coords[s * 4 + 2], 0.0, 1e-12);
  EXPECT_NEAR(t.coords[s * 4 + 3], 0.0, 1e-12);
}

TEST(DetLoss, PerfectNegative) {
  const auto t = assign_targets({{}}, 3, 4, {{1, 1}, {2, 2}}, 3);
  Buffer<double> raw = Buffer<double>::Zero(2 * 8 * 12);
  for (Index a = 0; a < 2; ++a) raw.segment((a * 8 + 4) * 12, 12).setConstant(-1000);
  EXPECT_LT(det_loss(Tensor<double>({1, 16, 3, 4}, raw), t).item(), 1e-6);
}

TEST(DetLoss, PerfectPositiveLeavesOnlyNoObjectTerm) {
  const GtBox box{1, 0.6, 0.3, 0.4, 0.5};
  const std::vector<Anchor> anchors{{1, 1}};
  const Index gh = 2, gw = 2;
  const auto t = assign_targets({{box}}, gh, gw, anchors, 3);
  Buffer<double> raw = Buffer<double>::Constant(8 * 4, 0.0);
  auto field = [&](Index f, Index cell) -> double& { return raw[f * 4 + cell]; };
  for (Index cell = 0; cell < 4; ++cell) field(4, cell) = 0.3;
  const Index cell = 0 * gw + 1;  // row 0, col 1
  const double ox = box.cx * gw - 1, oy = box.cy * gh;
  field(0, cell) = std::log(ox / (1 - ox));
  field(1, cell) = std::log(oy / (1 - oy));
  field(2, cell) = std::log(box.w * gw);
  field(3, cell) = std::log(box.h * gh);
  field(4, cell) = 40;
  field(5, cell) = -1000;
  field(6, cell) = 1000;
  field(7, cell) = -1000;
  const double expect = 0.5 * 3 * sig(0.3) * sig(0.3);
  EXPECT_NEAR(det_loss(Tensor<double>({1, 8, 2, 2}, raw), t).item(), expect, 1e-12);
}

TEST(DetLoss, HandEvaluatedSingleCell) {
  const GtBox box{2, 0.3, 0.6, 0.5, 0.8};
  const Anchor anchor{0.7, 0.9};
  const auto t = assign_targets({{box}}, 1, 1, {anchor}, 3);
  const double tx = 0.2, ty = -0.4, tw = 0.1, th = -0.3, to = 0.7, c0 = 0.5, c1 = -0.2, c2 = 0.9;
  const auto raw = Tensor<double>::from({1, 8, 1, 1}, {tx, ty, tw, th, to, c0, c1, c2});
  DetLossConfig cfg;
  cfg.lambda_coord = 5;
  cfg.lambda_noobj = 0.5;
  const double z = std::exp(c0) + std::exp(c1) + std::exp(c2);
  const double p0 = std::exp(c0) / z, p1 = std::exp(c1) / z, p2 = std::exp(c2) / z;
  const double coord = std::pow(sig(tx) - 0.3, 2) + std::pow(sig(ty) - 0.6, 2) +
                       std::pow(tw - std::log(0.5 / 0.7), 2) + std::pow(th - std::log(0.8 / 0.9), 2);
  const double expect = 5 * coord + std::pow(sig(to) - 1, 2) + p0 * p0 + p1 * p1 + std::pow(p2 - 1, 2);
  EXPECT_NEAR(det_loss(raw, t, cfg).item(), expect, 1e-10);
}

TEST(DetLoss, NonNegativeOnRandomInputs) {
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng = Rng::keyed(22, 0, seed);
    const std::vector<Anchor> anchors{{1, 1}, {2, 1}};
    std::vector<std::vector<GtBox>> gt(2);
    for (auto& img : gt) {
      for (int k = 0, n = static_cast<int>(rng.uniform_int(0, 3)); k < n; ++k) {
        img.push_back({static_cast<int>(rng.uniform_int(0, 2)), rng.uniform(), rng.uniform(), rng.uniform(0.05, 0.9),
                       rng.uniform(0.05, 0.9)});
      }
    }
    const auto t = assign_targets(gt, 3, 3, anchors, 3);
    EXPECT_GE(det_loss(random_logits(rng, {2, 16, 3, 3}, 10), t).item(), 0.0);
  }
}

TEST(MtlLoss, WeightedSum) {
  const auto l = mtl_loss(Tensor<double>::scalar(0.2), Tensor<double>::scalar(0.05), {10, 1});
  EXPECT_NEAR(l.item(), 2.05, 1e-15);
  EXPECT_NEAR(mtl_loss(Tensor<double>::scalar(0.2), Tensor<double>::scalar(0.05), {1, 1}).item(), 0.25, 1e-15);
  EXPECT_EQ(mtl_loss(Tensor<double>::scalar(0.2), Tensor<double>::scalar(0.05), {0, 1}).item(), 0.05);
}

TEST(MtlLoss, RejectsBadWeights) {
  EXPECT_THROW((LossWeights{-1, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{0, 0}.validate()), std::invalid_argument);
}

// Weights (0, 1) through the multi-task path reproduce the single-task
// detection encoder gradients exactly.
TEST(MtlLoss, DetectionOnlyWeightsMatchSingleTaskPath) {
  ModelSpec mtl = micro_spec();
  ModelSpec stl = mtl;
  stl.seg_head = false;
  SceneConfig scene;
  scene.seed = 8;
  scene.height = mtl.input_height;
  scene.width = mtl.input_width;
  scene.min_center_separation = 16;
  std::vector<Sample> samples{generate(scene, 0), generate(scene, 1)};
  const auto batch = make_batch<double>({&samples[0], &samples[1]}, mtl);

  auto encoder_grads = [&](const ModelSpec& spec, const LossWeights& w) {
    auto params = build<double>(spec, 6);
    const auto losses = compute_losses(params, spec, batch, w, BatchNormMode::train);
    losses.total.backward();
    std::map<std::string, Buffer<double>> g;
    for (const auto& [name, t] : params.tensors()) {
      if (name.rfind("enc.", 0) == 0 && !is_buffer_name(name)) g[name] = t.grad();
    }
    return std::pair{g, losses};
  };
  const auto [g_mtl, l_mtl] = encoder_grads(mtl, {0, 1});
  const auto [g_stl, l_stl] = encoder_grads(stl, {1, 1});
  EXPECT_EQ(l_mtl.total.item(), l_stl.det.item());
  ASSERT_EQ(g_mtl.size(), g_stl.size());
  for (const auto& [name, g] : g_mtl) {
    const double scale = std::max(1e-300, g_stl.at(name).abs().maxCoeff());
    EXPECT_LE((g - g_stl.at(name)).abs().maxCoeff() / scale, 1e-12) << name;
  }
}
