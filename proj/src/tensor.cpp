#include "mtlnet/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mtlnet {

namespace {
std::atomic<bool> g_check_finite{true};
std::atomic<int> g_threads{1};
thread_local bool t_grad_enabled = true;
}  // namespace

Index numel_of(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void set_check_finite(bool enabled) { g_check_finite = enabled; }
bool check_finite_enabled() { return g_check_finite; }

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Buffer<Scalar> data, bool requires_grad) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, Scalar(0), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(const Shape& shape, Scalar value, bool requires_grad) {
  return Tensor(shape, Buffer<Scalar>::Constant(numel_of(shape), value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from(const Shape& shape, std::initializer_list<Scalar> values,
                                    bool requires_grad) {
  Buffer<Scalar> data(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) data[i++] = v;
  return Tensor(shape, std::move(data), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  if (axis < 0) axis += ndim();
  if (axis < 0 || axis >= ndim()) throw ShapeError("axis out of range");
  return impl_->shape[axis];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> index) const {
  if (static_cast<int>(index.size()) != ndim()) throw ShapeError("index rank mismatch");
  Index flat = 0;
  int axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= impl_->shape[axis]) throw ShapeError("index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

template <typename Scalar>
const Buffer<Scalar>& Tensor<Scalar>::grad() const {
  if (!impl_->grad) throw std::logic_error("tensor has no gradient");
  return *impl_->grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::grad_tensor() const {
  return Tensor(impl_->shape, grad());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  Tensor out;
  out.impl_ = std::make_shared<Impl>();
  out.impl_->shape = impl_->shape;
  out.impl_->data = impl_->data;
  return out;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  Tensor out = detach();
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar loss");
  if (!requires_grad()) throw std::logic_error("backward() on a tensor that does not require grad");
  using ImplPtr = Impl*;

  // Post-order DFS; reversed it visits every node before its inputs.
  std::vector<ImplPtr> order;
  std::unordered_set<ImplPtr> visited;
  std::vector<std::pair<ImplPtr, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node_impl, next] = stack.back();
    const auto& node = node_impl->node;
    if (node && next < node->inputs.size()) {
      ImplPtr child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(node_impl);
    stack.pop_back();
  }

  std::unordered_map<ImplPtr, Buffer<Scalar>> pending;
  pending.emplace(impl_.get(), Buffer<Scalar>::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    ImplPtr current = *it;
    auto found = pending.find(current);
    if (found == pending.end()) continue;
    Buffer<Scalar> upstream = std::move(found->second);
    pending.erase(found);

    if (!current->node) {
      if (current->grad) {
        *current->grad += upstream;
      } else {
        current->grad = std::move(upstream);
      }
      continue;
    }
    const auto& node = *current->node;
    if (!node.backward) {
      throw std::logic_error("op '" + node.op + "' has no gradient");
    }
    std::vector<Buffer<Scalar>*> slots(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      ImplPtr in = node.inputs[i].get();
      if (!in->requires_grad) continue;
      auto [slot, inserted] = pending.try_emplace(in);
      if (inserted) slot->second = Buffer<Scalar>::Zero(in->data.size());
      slots[i] = &slot->second;
    }
    node.backward(upstream, slots);
  }
}

template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Buffer<Scalar> data, std::string op,
                           std::vector<Tensor<Scalar>> inputs,
                           typename detail::GradNode<Scalar>::BackwardFn backward) {
  if (check_finite_enabled() && !data.allFinite()) {
    throw NonFiniteError("non-finite value produced by " + op);
  }
  Tensor<Scalar> out(std::move(shape), std::move(data));
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    auto node = std::make_shared<detail::GradNode<Scalar>>();
    node->op = std::move(op);
    node->backward = std::move(backward);
    for (auto& in : inputs) node->inputs.push_back(in.impl());
    out.impl()->node = std::move(node);
    out.set_requires_grad(true);
  }
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, Buffer<float>, std::string, std::vector<Tensor<float>>,
                                   detail::GradNode<float>::BackwardFn);
template Tensor<double> make_result(Shape, Buffer<double>, std::string,
                                    std::vector<Tensor<double>>,
                                    detail::GradNode<double>::BackwardFn);

}  // namespace mtlnet
