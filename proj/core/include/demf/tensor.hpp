#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace demf {

#ifdef DEMF_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward;

  std::span<Real> ensure_grad();
};

}  // namespace detail

// Dense row-major array with an optional reverse-mode gradient. Copies share
// the underlying node (handle semantics), so a tensor used in several places
// of a graph receives the sum of all gradient contributions.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const Real> data() const { return node_->data; }
  // Mutating values of a tensor that is already part of a recorded graph
  // invalidates that graph; only optimizers and initializers do this.
  std::span<Real> data_mut() { return node_->data; }
  Real operator[](std::size_t i) const { return node_->data[i]; }
  Real item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> grad_mut() { return node_->ensure_grad(); }
  void zero_grad();

  // Reverse-mode sweep from this scalar. Gradients accumulate (+=) into every
  // reachable tensor that requires grad.
  void backward() const;

  // Same values, cut from the graph.
  Tensor detach() const;
  // Deep copy of values (and requires_grad flag), no graph history.
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(Shape, std::vector<Real>, std::initializer_list<Tensor>,
                            std::function<void(const detail::Node&)>);
  friend Tensor make_result(Shape, std::vector<Real>, const std::vector<Tensor>&,
                            std::function<void(const detail::Node&)>);
};

// Builds an op result. The backward rule is attached only when gradient
// recording is enabled and at least one input requires grad.
Tensor make_result(Shape shape, std::vector<Real> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const detail::Node&)> backward);
Tensor make_result(Shape shape, std::vector<Real> data, const std::vector<Tensor>& inputs,
                   std::function<void(const detail::Node&)> backward);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace demf
