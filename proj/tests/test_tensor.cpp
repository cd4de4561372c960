#include "mtlnet/ops.hpp"
#include "mtlnet/tensor_io.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

using namespace mtlnet;

TEST(Tensor, FactoriesAndShape) {
  auto z = Tensor<float>::zeros({2, 3, 4, 5});
  EXPECT_EQ(z.numel(), 120);
  EXPECT_EQ(z.dim(2), 4);
  EXPECT_EQ(z.data().abs().maxCoeff(), 0.0f);
  auto t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(t.at({1, 0}), 3.0);
  EXPECT_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor<double>::from({3}, {1, 2}), ShapeError);
}

TEST(Tensor, CloneOwnsStorage) {
  auto t = Tensor<double>::from({3}, {1, 2, 3});
  auto c = t.clone();
  c.mutable_data()[0] = 9;
  EXPECT_EQ(t.data()[0], 1.0);
}

TEST(Tensor, NonFiniteResultThrows) {
  auto big = Tensor<float>::full({2}, 100.0f);
  EXPECT_THROW(exp(big), NonFiniteError);
  set_check_finite(false);
  EXPECT_NO_THROW(exp(big));
  set_check_finite(true);
}

TEST(Tensor, CastPreservesValues) {
  auto t = Tensor<double>::from({2}, {0.5, -1.25});
  auto f = t.cast<float>();
  EXPECT_EQ(f.data()[0], 0.5f);
  EXPECT_EQ(f.data()[1], -1.25f);
}

TEST(TensorIo, RoundTripIsBitExact) {
  Buffer<double> b(24);
  for (Index i = 0; i < 24; ++i) b[i] = std::sin(double(i)) * 1e-3 + (i == 5 ? std::numeric_limits<double>::denorm_min() : 0);
  Tensor<double> t({2, 3, 4}, b);
  std::stringstream ss;
  write_tensor(ss, t);
  auto back = read_tensor<double>(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.ptr(), t.ptr(), 24 * sizeof(double)), 0);
}

TEST(TensorIo, RejectsDtypeMismatchAndTruncation) {
  std::stringstream ss;
  write_tensor(ss, Tensor<float>::full({4}, 1.0f));
  const std::string bytes = ss.str();
  std::stringstream wrong(bytes);
  EXPECT_THROW(read_tensor<double>(wrong), FormatError);
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor<float>(cut), FormatError);
  std::stringstream junk("MTLX garbage");
  EXPECT_THROW(read_tensor<float>(junk), FormatError);
}

TEST(Autograd, SumGivesOnes) {
  auto x = Tensor<double>::from({2, 3}, {1, -2, 3, 4, 5, -6}, true);
  sum(x).backward();
  EXPECT_TRUE((x.grad() == 1.0).all());
}

TEST(Autograd, ReluSubgradient) {
  auto x = Tensor<double>::from({2}, {-1, 2}, true);
  sum(relu(x)).backward();
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
}

TEST(Autograd, LeafGradientsAccumulateUntilZeroed) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  sum(scale(x, 3.0)).backward();
  sum(scale(x, 3.0)).backward();
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, SharedSubexpressionSumsBothPaths) {
  auto x = Tensor<double>::from({1}, {3}, true);
  auto y = mul(x, x);
  sum(add(y, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = sum(x);
  }
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, BackwardIsLinear) {
  // grad(a f + b g) = a grad f + b grad g.
  Buffer<double> xb(12);
  for (Index i = 0; i < 12; ++i) xb[i] = std::cos(1.7 * double(i));
  auto x = Tensor<double>({1, 3, 2, 2}, xb, true);
  auto f = [&] { return sum(mul(relu(x), x)); };
  auto g = [&] { return sum(softmax(x, 1)); };
  const double a = 2.5, b = -0.75;
  f().backward();
  const Buffer<double> gf = x.grad();
  x.zero_grad();
  g().backward();
  const Buffer<double> gg = x.grad();
  x.zero_grad();
  add(scale(f(), a), scale(g(), b)).backward();
  const Buffer<double> expect = a * gf + b * gg;
  for (Index i = 0; i < 12; ++i) EXPECT_NEAR(x.grad()[i], expect[i], 1e-10 * (std::abs(expect[i]) + 1));
}

TEST(Parallel, ResultsIndependentOfThreadCount) {
  Buffer<float> xb(4 * 3 * 9 * 9), wb(5 * 3 * 3 * 3);
  for (Index i = 0; i < xb.size(); ++i) xb[i] = std::sin(0.37f * float(i));
  for (Index i = 0; i < wb.size(); ++i) wb[i] = std::cos(0.11f * float(i));
  Tensor<float> x({4, 3, 9, 9}, xb, true), w({5, 3, 3, 3}, wb, true);
  ConvSpec s{3, 5, {3, 3}, {2, 2}, {1, 1}, false};
  auto run = [&](int threads) {
    set_num_threads(threads);
    x.zero_grad();
    w.zero_grad();
    auto y = conv2d(x, w, Tensor<float>(), s);
    sum(mul(y, y)).backward();
    std::vector<float> out(y.data().begin(), y.data().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  const auto one = run(1);
  const auto three = run(3);
  set_num_threads(1);
  EXPECT_EQ(one, three);
}
