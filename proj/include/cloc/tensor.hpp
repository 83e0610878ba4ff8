#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every op records a node holding its forward values, its parents and a
// closure that pushes the node's gradient into those parents. Leaves created
// with requires_grad accumulate gradients across backward() calls; interior
// nodes are reset at the start of every pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cloc/errors.hpp"

namespace cloc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;
  const char* op = "leaf";
  // Sign pattern (input > 0) recorded by piecewise-linear ops; used by the
  // finite-difference checker to detect perturbations that cross a kink.
  std::vector<std::uint8_t> kink_pattern;

  bool is_leaf() const { return !backward; }

  std::vector<double>& grad_buffer() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Shared handle to a graph node. Copies alias the same storage; use clone()
/// for an independent leaf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != shape_size(shape)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                       shape_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) { return from({}, {value}, requires_grad); }
  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const auto n = values.size();
    return from({n}, std::move(values), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  /// Records an op result. The node joins the graph only when grad mode is on
  /// and at least one parent requires a gradient; otherwise it is a constant.
  static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                        detail::BackwardFn backward, const char* op,
                        std::vector<std::uint8_t> kink_pattern = {}) {
    Tensor out = from(std::move(shape), std::move(values));
    bool track = false;
    if (grad_enabled()) {
      for (const auto& p : parents) track = track || p.requires_grad();
    }
    out.node_->op = op;
    if (track) {
      out.node_->requires_grad = true;
      out.node_->backward = std::move(backward);
      out.node_->parents.reserve(parents.size());
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->kink_pattern = std::move(kink_pattern);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t dim() const { return node().shape.size(); }
  std::size_t size() const { return node().values.size(); }
  std::size_t rows() const {
    require_rank(2, "rows");
    return node().shape[0];
  }
  std::size_t cols() const {
    require_rank(2, "cols");
    return node().shape[1];
  }

  std::span<const double> values() const { return node().values; }
  /// Direct write access; only meaningful on leaves (optimizer updates, probes).
  std::span<double> mutable_values() { return node().values; }

  double item() const {
    if (size() != 1) throw ShapeError("item(): tensor of shape " + shape_string(shape()) + " is not a scalar");
    return node().values[0];
  }
  double operator[](std::size_t i) const { return node().values.at(i); }
  double at(std::size_t r, std::size_t c) const {
    require_rank(2, "at");
    return node().values.at(r * node().shape[1] + c);
  }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!node().is_leaf()) throw UsageError("set_requires_grad: only leaves can change requires_grad");
    node().requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node().is_leaf(); }
  const char* op() const { return node().op; }

  bool has_grad() const { return node().grad.size() == node().values.size() && !node().values.empty(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw UsageError("grad(): no gradient has been accumulated");
    return node().grad;
  }
  void zero_grad() { node().grad.clear(); }

  /// Independent leaf with copied values and no graph history.
  Tensor clone(bool requires_grad) const { return from(shape(), node().values, requires_grad); }
  Tensor detach() const { return clone(false); }

  /// Reverse-mode pass from this scalar.
  void backward() const;

  detail::Node& node() const {
    if (!node_) throw UsageError("use of an undefined tensor");
    return *node_;
  }
  const detail::NodePtr& node_ptr() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  void require_rank(std::size_t rank, const char* what) const {
    if (dim() != rank) {
      throw ShapeError(std::string(what) + "(): expected rank " + std::to_string(rank) + ", got shape " +
                       shape_string(shape()));
    }
  }

  detail::NodePtr node_;
};

namespace detail {

/// Nodes reachable from root that take part in differentiation, ordered so
/// every node follows all of its parents.
inline std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (!root->requires_grad) return order;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (size() != 1) {
    throw UsageError("backward(): root must be a scalar, got shape " + shape_string(shape()));
  }
  auto order = detail::topological_order(node_.get());
  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->values.size(), 0.0);
  }
  if (order.empty()) return;
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

inline void backward(const Tensor& root) { root.backward(); }

/// Hash of every kink sign pattern in the graph under root; changes when a
/// perturbation moves some ReLU/hinge input across zero.
inline std::uint64_t kink_signature(const Tensor& root) {
  std::uint64_t h = 1469598103934665603ULL;
  std::vector<detail::Node*> stack{root.node_ptr().get()};
  std::unordered_set<detail::Node*> seen{stack.back()};
  std::vector<detail::Node*> order;
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  for (auto* n : order) {
    for (auto bit : n->kink_pattern) {
      h ^= bit;
      h *= 1099511628211ULL;
    }
    h ^= 0xff;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace cloc
