#include "mtlnet/train.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace mtlnet;
namespace fs = std::filesystem;

namespace {

fs::path work_dir(const std::string& name) {
  const fs::path p = fs::path(MTLNET_WORK_DIR) / "test_train" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig tiny_experiment(const std::string& name = "MTL") {
  const auto j = nlohmann::json::parse(R"({
    "schema": "mtlnet.experiment/1",
    "model": {"input_size": [64, 64], "width_mult": 0.125, "anchors": [[1.0, 1.0]]},
    "optimizer": {"steps": 4, "batch_size": 2, "seed": 3},
    "train_scene": {"config": {"seed": 1, "height": 64, "width": 64, "min_center_separation": 16}, "count": 6}
  })");
  auto with_name = j;
  with_name["name"] = name;
  return with_name.get<ExperimentConfig>();
}

std::vector<Sample> scenes(const ExperimentConfig& exp) {
  std::vector<Sample> out;
  for (Index i = 0; i < exp.train_count; ++i) out.push_back(generate(*exp.train_scene, i));
  return out;
}

ModelParams<double> single_tensor(std::initializer_list<double> values) {
  ModelParams<double> p;
  p.insert("w", Tensor<double>::from({static_cast<Index>(values.size())}, values, true));
  return p;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  auto p = single_tensor({1.0, -2.0, 3.0});
  AdamState<double> st;
  GradMap<double> g{{"w", Buffer<double>::Zero(3)}};
  for (int i = 0; i < 3; ++i) adam_step(p, g, st, OptimizerConfig{});
  EXPECT_EQ(p.at("w").data()[0], 1.0);
  EXPECT_EQ(p.at("w").data()[1], -2.0);
  EXPECT_EQ(p.at("w").data()[2], 3.0);
}

TEST(Adam, StepsMoveByLearningRate) {
  auto p = single_tensor({1.0, 1.0});
  AdamState<double> st;
  Buffer<double> g(2);
  g << 0.3, -4.0;
  const OptimizerConfig cfg;
  adam_step(p, GradMap<double>{{"w", g}}, st, cfg);
  EXPECT_NEAR(p.at("w").data()[0], 1.0 - cfg.lr, 1e-10);
  EXPECT_NEAR(p.at("w").data()[1], 1.0 + cfg.lr, 1e-10);
  adam_step(p, GradMap<double>{{"w", g}}, st, cfg);
  EXPECT_NEAR(p.at("w").data()[0], 1.0 - 2 * cfg.lr, 1e-10);
  EXPECT_NEAR(p.at("w").data()[1], 1.0 + 2 * cfg.lr, 1e-10);
  EXPECT_EQ(st.step, 2);
}

TEST(Adam, NonFiniteGradientModifiesNothing) {
  ModelParams<double> p;
  p.insert("a", Tensor<double>::from({2}, {1, 2}, true));
  p.insert("b", Tensor<double>::from({1}, {5}, true));
  AdamState<double> st;
  Buffer<double> ga(2), gb(1);
  ga << 0.5, 0.5;
  gb << std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_step(p, GradMap<double>{{"a", ga}, {"b", gb}}, st, OptimizerConfig{}), NonFiniteError);
  EXPECT_EQ(p.at("a").data()[0], 1.0);
  EXPECT_EQ(p.at("b").data()[0], 5.0);
  EXPECT_EQ(st.step, 0);
  EXPECT_TRUE(st.m.empty());
}

TEST(BatchIndices, EachEpochIsAPermutation) {
  for (Index n : {1, 5, 7, 16}) {
    for (Index bs : {1, 3, 4}) {
      std::vector<Index> seq;
      for (Index step = 0; step < 3 * n; ++step) {
        const auto idx = batch_indices(9, n, bs, step);
        ASSERT_EQ(static_cast<Index>(idx.size()), bs);
        seq.insert(seq.end(), idx.begin(), idx.end());
      }
      for (std::size_t e = 0; e + n <= seq.size(); e += n) {
        std::set<Index> epoch(seq.begin() + e, seq.begin() + e + n);
        EXPECT_EQ(static_cast<Index>(epoch.size()), n);
        EXPECT_EQ(*epoch.rbegin(), n - 1);
      }
    }
  }
  EXPECT_EQ(batch_indices(4, 10, 3, 7), batch_indices(4, 10, 3, 7));
  EXPECT_NE(batch_indices(4, 10, 10, 0), batch_indices(5, 10, 10, 0));
}

TEST(Presets, FixHeadsAndWeights) {
  const std::map<std::string, std::tuple<bool, bool, double, double>> expected{
      {"STL_Seg", {true, false, 1, 0}}, {"STL_Det", {false, true, 0, 1}}, {"MTL", {true, true, 1, 1}},
      {"MTL_10", {true, true, 10, 1}},  {"MTL_100", {true, true, 100, 1}}};
  for (const auto& [name, e] : expected) {
    const auto exp = tiny_experiment(name);
    EXPECT_EQ(exp.model.seg_head, std::get<0>(e)) << name;
    EXPECT_EQ(exp.model.det_head, std::get<1>(e)) << name;
    EXPECT_EQ(exp.weights.seg, std::get<2>(e)) << name;
    EXPECT_EQ(exp.weights.det, std::get<3>(e)) << name;
  }
  EXPECT_EQ(experiment_name_for_column("STL Seg"), "STL_Seg");
}

TEST(ExperimentConfig, RejectsContradictions) {
  auto j = nlohmann::json::parse(R"({"name": "MTL_10", "model": {"input_size": [64, 64]},
                                     "train_scene": {"config": {"height": 64, "width": 64}, "count": 2}})");
  EXPECT_NO_THROW(j.get<ExperimentConfig>());
  auto bad = j;
  bad["weights"] = {{"seg", 1}, {"det", 1}};
  EXPECT_THROW(bad.get<ExperimentConfig>(), std::invalid_argument);
  bad = j;
  bad["name"] = "STL_Bogus";
  EXPECT_THROW(bad.get<ExperimentConfig>(), std::invalid_argument);
  bad = j;
  bad["optimizer"] = {{"lr", -1}};
  EXPECT_THROW(bad.get<ExperimentConfig>(), std::invalid_argument);
  bad = j;
  bad.erase("train_scene");
  EXPECT_THROW(bad.get<ExperimentConfig>(), std::invalid_argument);
}

TEST(Train, ZeroStepsKeepsInitialWeights) {
  auto exp = tiny_experiment();
  exp.optimizer.steps = 0;
  const auto dir = work_dir("zero");
  const auto r = train<float>(exp, scenes(exp), {}, dir);
  EXPECT_TRUE(r.losses.empty());
  ASSERT_EQ(r.evals.size(), 1u);
  const auto init = build<float>(exp.model, exp.optimizer.seed);
  const auto saved = load_checkpoint<float>(dir / "final.mtlw");
  for (const auto& [name, t] : init.tensors()) {
    EXPECT_TRUE((saved.at(name).data() == t.data()).all()) << name;
  }
}

TEST(Train, RepeatableLossLog) {
  const auto exp = tiny_experiment();
  const auto data = scenes(exp);
  const auto dir = work_dir("rep_a");
  const auto a = train<float>(exp, data, {}, dir);
  const auto b = train<float>(exp, data, {}, work_dir("rep_b"));
  ASSERT_EQ(a.losses.size(), 4u);
  for (std::size_t i = 0; i < a.losses.size(); ++i) {
    EXPECT_EQ(a.losses[i].total, b.losses[i].total);
    EXPECT_EQ(a.losses[i].seg, b.losses[i].seg);
    EXPECT_EQ(a.losses[i].det, b.losses[i].det);
  }
  EXPECT_TRUE(fs::exists(dir / "loss.csv"));
}

TEST(Train, LossLogColumns) {
  std::ostringstream os;
  write_loss_csv(os, {{0, 1.5, std::nullopt, 1.5}}, {1, 0});
  EXPECT_EQ(os.str(), "step,L_seg,L_det,L_total,w_seg,w_det\n0,1.5,,1.5,1,0\n");
}

TEST(Train, OverfitsSmallSet) {
  auto exp = tiny_experiment();
  exp.optimizer.steps = 150;
  exp.optimizer.lr = 0.002;
  const auto r = train<float>(exp, scenes(exp), {}, {});
  ASSERT_EQ(r.losses.size(), 150u);
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) {
    head += r.losses[i].total;
    tail += r.losses[r.losses.size() - 1 - i].total;
  }
  EXPECT_LT(tail, 0.5 * head);
}

TEST(Train, DivergenceKeepsLastGoodCheckpoint) {
  auto exp = tiny_experiment();
  exp.optimizer.lr = 1e30;
  exp.optimizer.steps = 20;
  const auto dir = work_dir("diverge");
  EXPECT_THROW(train<float>(exp, scenes(exp), {}, dir), TrainingDiverged);
  EXPECT_TRUE(fs::exists(dir / "last_good.mtlw"));
  EXPECT_TRUE(fs::exists(dir / "loss.csv"));
  EXPECT_FALSE(fs::exists(dir / "final.mtlw"));
}

TEST(Median, Basics) {
  EXPECT_FALSE(median({}).has_value());
  EXPECT_EQ(median({3}), 3.0);
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
}

TEST(Study, SmokeRunsEveryColumnAndSeed) {
  auto j = nlohmann::json::parse(std::ifstream(fs::path(MTLNET_SOURCE_DIR) / "configs" / "study_smoke.json"));
  j["seeds"] = {1, 2, 3};
  j["base"]["optimizer"]["steps"] = 2;
  const auto cfg = j.get<StudyConfig>();
  std::vector<Sample> train_set, eval_set;
  for (Index i = 0; i < 4; ++i) train_set.push_back(generate(*cfg.base.train_scene, i));
  for (Index i = 0; i < 2; ++i) eval_set.push_back(generate(*cfg.base.eval_scene, i));
  const auto dir = work_dir("study");
  const auto r = run_study<float>(cfg, train_set, eval_set, dir);
  EXPECT_EQ(r.runs.size(), 15u);
  for (const auto& run : r.runs) EXPECT_TRUE(run.ok) << run.column << " " << run.error;
  EXPECT_TRUE(fs::exists(dir / "results.csv"));
  EXPECT_TRUE(fs::exists(dir / "results.json"));
  EXPECT_EQ(r.table.rows.size(), 8u);
  EXPECT_FALSE(r.median_miou.at("STL Seg") == std::nullopt && r.median_miou.at("MTL") == std::nullopt);
}
