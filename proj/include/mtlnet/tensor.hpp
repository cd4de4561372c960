#pragma once

// Dense NCHW tensor with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle to shared, immutable storage. Only the gradient
// slot (and parameter storage during an optimizer step) is ever written after
// creation. Ops record a GradNode when any input requires a gradient and
// gradient recording is enabled on the calling thread.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <initializer_list>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mtlnet {

using Index = std::int64_t;
using Shape = std::vector<Index>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>,
                "tensors hold float or double");
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Index numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Output finiteness scan after every op. On by default.
void set_check_finite(bool enabled);
bool check_finite_enabled();

// Worker count used by batch-parallel kernels. Results never depend on it.
void set_num_threads(int n);
int num_threads();

// Runs body(i) for i in [0, n). Chunks are contiguous and static so each
// index always runs the same arithmetic regardless of the worker count.
template <typename Body>
void parallel_for(Index n, Body&& body) {
  const Index workers = std::min<Index>(num_threads(), n);
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&](Index begin, Index end) {
    try {
      for (Index i = begin; i < end; ++i) body(i);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  const Index chunk = (n + workers - 1) / workers;
  for (Index w = 1; w < workers; ++w) {
    const Index begin = w * chunk;
    const Index end = std::min(n, begin + chunk);
    if (begin < end) pool.emplace_back(run, begin, end);
  }
  run(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// Disables gradient recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

template <typename Scalar>
class Tensor;

namespace detail {

template <typename Scalar>
struct TensorImpl;

template <typename Scalar>
struct GradNode {
  // Receives the output gradient and one accumulation slot per input; a slot
  // is null when that input does not need a gradient. Must add, never assign.
  using BackwardFn =
      std::function<void(const Buffer<Scalar>&, std::span<Buffer<Scalar>* const>)>;

  std::string op;
  std::vector<std::shared_ptr<TensorImpl<Scalar>>> inputs;
  BackwardFn backward;  // empty for ops without a gradient
};

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  Buffer<Scalar> data;
  bool requires_grad = false;
  std::optional<Buffer<Scalar>> grad;
  std::shared_ptr<GradNode<Scalar>> node;
};

}  // namespace detail

template <typename Scalar>
class Tensor {
 public:
  using Impl = detail::TensorImpl<Scalar>;
  using Node = detail::GradNode<Scalar>;

  Tensor() = default;
  Tensor(Shape shape, Buffer<Scalar> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Scalar value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::initializer_list<Scalar> values,
                     bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Index dim(int axis) const;
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  Index numel() const { return impl_->data.size(); }
  static constexpr DType dtype() { return dtype_of<Scalar>(); }

  const Buffer<Scalar>& data() const { return impl_->data; }
  // Writable storage. Callers must hold exclusive access (optimizer updates,
  // checkpoint loading); ops never call this on their inputs.
  Buffer<Scalar>& mutable_data() { return impl_->data; }
  const Scalar* ptr() const { return impl_->data.data(); }

  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool has_grad() const { return impl_->grad.has_value(); }
  const Buffer<Scalar>& grad() const;
  Tensor grad_tensor() const;
  void zero_grad() { impl_->grad.reset(); }

  bool is_leaf() const { return impl_->node == nullptr; }
  Tensor detach() const;
  Tensor clone() const;

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(impl_->shape, impl_->data.template cast<Other>());
  }

  // Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  // calls until zero_grad(); intermediate gradients are transient.
  void backward() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Builds an op result, running the finiteness scan and recording a GradNode
// when gradients are enabled and some input requires one.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Buffer<Scalar> data, std::string op,
                           std::vector<Tensor<Scalar>> inputs,
                           typename detail::GradNode<Scalar>::BackwardFn backward);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mtlnet
