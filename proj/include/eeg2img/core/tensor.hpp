#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "eeg2img/core/error.hpp"

namespace eeg2img {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

/// One vertex of the dynamic compute graph. Leaves carry parameters and
/// inputs; interior nodes carry op outputs plus the closure that pushes
/// their gradient into their parents.
struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value) {
  if (shape_numel(shape) != value.size()) {
    throw ShapeError("tensor data length " + std::to_string(value.size()) +
                     " does not match shape " + shape_str(shape));
  }
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->id = next_node_id();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same node. Values are
/// immutable after creation except for leaves, which the optimizer and
/// checkpoint loader update in place through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (double v : data) {
      if (!std::isfinite(v)) throw ValueError("tensor data contains a non-finite value");
    }
    Tensor t(detail::make_node(std::move(shape), std::move(data)));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) { return from_data({1}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  double at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  /// In-place access for leaves only.
  std::span<double> mutable_data() {
    if (!node_->leaf) throw StateError("mutable_data() is only permitted on leaf tensors");
    return node_->value;
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  std::vector<double> to_vector() const { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  void set_requires_grad(bool flag) {
    if (!node_->leaf) throw StateError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = flag;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// New leaf sharing no graph history with this tensor.
  Tensor detach() const { return Tensor(detail::make_node(node_->shape, node_->value)); }

  /// Reverse-mode sweep from a scalar loss. Interior nodes are released
  /// afterwards; a second call without a fresh forward pass is an error.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  if (!node_) throw StateError("backward() on an undefined tensor");
  if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (node_->consumed) {
    throw StateError("stale graph: backward() already ran over this graph; run the forward pass again");
  }
  if (!node_->requires_grad) throw StateError("loss does not depend on any tensor that requires gradients");
  if (!std::isfinite(node_->value[0])) throw DivergenceError("loss is not finite");

  // Creation order is a topological order, so descending ids visit every
  // node after all of its consumers.
  // Holding shared owners keeps interior nodes alive while their consumers
  // release parent links below.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{node_};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (n->consumed) {
      throw StateError("stale graph: a subgraph of this loss was consumed by an earlier backward()");
    }
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->id > b->id; });

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (const auto& n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
    if (!n->leaf) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->consumed = true;
    }
  }
}

}  // namespace eeg2img
