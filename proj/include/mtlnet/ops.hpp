#pragma once

// Differentiable primitives. Every function is pure: it reads its inputs and
// returns a new tensor, recording a gradient node when needed. The one
// exception is batchnorm2d in train mode, which also updates the running
// statistics it is handed.

#include "mtlnet/tensor.hpp"

#include <array>

namespace mtlnet {

struct ConvSpec {
  Index in_ch = 1;
  Index out_ch = 1;
  std::array<Index, 2> kernel{1, 1};
  std::array<Index, 2> stride{1, 1};
  std::array<Index, 2> padding{0, 0};
  bool has_bias = false;

  // floor((H + 2p - k) / s) + 1 per axis; throws when either is < 1.
  std::array<Index, 2> output_size(Index height, Index width) const;
};

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      const Tensor<Scalar>& bias, const ConvSpec& spec);

// Transposed convolution with weight [C_in, C_out, k, k]. Requires k >= stride
// and (k - stride) even; each side is cropped by (k - stride) / 2 so the output
// is exactly stride times the input.
template <typename Scalar>
Tensor<Scalar> deconv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index stride);

enum class BatchNormMode { train, eval };

template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> running_mean;  // [C]
  Tensor<Scalar> running_var;   // [C], biased batch variance
};

template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                           const Tensor<Scalar>& beta, BatchNormState<Scalar>& state,
                           BatchNormMode mode, double eps = 1e-5, double momentum = 0.1);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);

// Window max with implicit -inf padding. Ties route the gradient to the first
// maximum in row-major window order.
template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& x, Index kernel, Index stride, Index padding = 0);

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& x, const Tensor<Scalar>& y);

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& x, const Tensor<Scalar>& y);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, double factor);

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& x, const Tensor<Scalar>& y);

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis);

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);

// Rows [begin, end) of an NCHW tensor.
template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, Index begin, Index end);

// Index of the maximum along `axis` (ties -> lowest index), returned as Scalar
// values. Has no gradient: backward through it throws.
template <typename Scalar>
Tensor<Scalar> argmax(const Tensor<Scalar>& x, int axis);

// Fingerprint of the piecewise branch taken by relu (input signs) and
// maxpool2d (window winners) on this thread while the probe is alive. Two
// evaluations with equal fingerprints lie on the same smooth piece.
class BranchProbe {
 public:
  BranchProbe();
  ~BranchProbe();
  BranchProbe(const BranchProbe&) = delete;
  BranchProbe& operator=(const BranchProbe&) = delete;
  std::uint64_t fingerprint() const { return hash_; }
  void reset() { hash_ = kSeed; }
  void fold(std::uint64_t v) { hash_ = (hash_ ^ v) * 0x100000001B3ULL; }

 private:
  static constexpr std::uint64_t kSeed = 0xCBF29CE484222325ULL;
  std::uint64_t hash_ = kSeed;
  BranchProbe* previous_;
};
BranchProbe* active_branch_probe();

// Operator sugar for the common elementwise cases.
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  return add(x, y);
}
template <typename Scalar>
Tensor<Scalar> operator*(double factor, const Tensor<Scalar>& x) {
  return scale(x, factor);
}

}  // namespace mtlnet
