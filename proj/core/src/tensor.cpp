#include "demf/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>
#include <utility>

#include "demf/error.hpp"

namespace demf {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::span<Real> detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), Real{0});
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeMismatch("tensor", shape, {});
  }
  if (numel_of(shape) != data.size()) {
    throw ShapeMismatch("tensor", shape, {data.size()});
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, Real{0}), requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Real Tensor::item() const {
  if (numel() != 1) throw NonScalarLoss(shape());
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), Real{0});
}

void Tensor::backward() const {
  if (!node_ || numel() != 1) throw NonScalarLoss(node_ ? shape() : Shape{});
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order; each node is
  // appended once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += Real{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = node_->requires_grad && node_->parents.empty();
  return Tensor(std::move(node));
}

namespace {

template <typename Range>
Tensor build_result(Shape shape, std::vector<Real> data, const Range& inputs,
                    std::function<void(const detail::Node&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  detail::Node* node = out.node();
  node->requires_grad = true;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) node->parents.push_back(t.node_ptr());
  }
  node->backward = std::move(backward);
  return out;
}

}  // namespace

Tensor make_result(Shape shape, std::vector<Real> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const detail::Node&)> backward) {
  return build_result(std::move(shape), std::move(data), inputs, std::move(backward));
}

Tensor make_result(Shape shape, std::vector<Real> data, const std::vector<Tensor>& inputs,
                   std::function<void(const detail::Node&)> backward) {
  return build_result(std::move(shape), std::move(data), inputs, std::move(backward));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace demf
