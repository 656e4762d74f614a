#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace clmex {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ", ";
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

/// Raised when operand shapes do not conform. Carries the op name and both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": shape mismatch " + to_string(a) + " vs " +
                              to_string(b)),
        op_(op), lhs_(a), rhs_(b) {}
  ShapeError(const std::string& op, const std::string& what)
      : std::invalid_argument(op + ": " + what), op_(op) {}

  const std::string& op() const noexcept { return op_; }
  const Shape& lhs() const noexcept { return lhs_; }
  const Shape& rhs() const noexcept { return rhs_; }

 private:
  std::string op_;
  Shape lhs_, rhs_;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Misuse of the gradient graph (non-scalar loss, consumed or detached graph).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn && parents.empty(); }

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

/// Disables graph construction for the lifetime of the guard (evaluation paths).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array of doubles that participates in reverse-mode
/// differentiation. Copies share the underlying node, like a handle.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor", "shape " + to_string(shape) + " holds " +
                                     std::to_string(numel(shape)) + " values, got " +
                                     std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from(Shape{}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const double> values() const { return node_->values; }
  std::span<double> mutable_values() { return node_->values; }
  double operator[](std::size_t i) const { return node_->values[i]; }

  /// Empty until a backward pass reaches this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->values.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  double item() const {
    if (size() != 1) {
      throw ShapeError("item", "expected a single-element tensor, got " + to_string(shape()));
    }
    return node_->values[0];
  }

  /// Same values, no graph history, requires_grad = false.
  Tensor detach() const { return from(node_->shape, node_->values, false); }

  /// Back-propagates from a scalar. Leaves accumulate into grad; the graph is
  /// consumed unless retain_graph is set.
  void backward(bool retain_graph = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result; wires the backward rule only when some input needs grad.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                          std::initializer_list<Tensor> inputs,
                          std::function<void(const Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) {
      if (t.defined() && t.requires_grad()) needs_grad = true;
    }
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const auto& t : inputs) {
      if (t.defined()) node->parents.push_back(t.node());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

inline void Tensor::backward(bool retain_graph) const {
  if (!defined()) throw GraphError("backward: undefined tensor");
  if (size() != 1) {
    throw GraphError("backward: loss must be scalar-shaped, got " + to_string(shape()));
  }
  if (node_->consumed) {
    throw GraphError("backward: graph already consumed; re-run forward or pass retain_graph");
  }
  if (!node_->requires_grad) {
    throw GraphError("backward: loss is detached (no input requires grad)");
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf()) std::ranges::fill(n->grad_buffer(), 0.0);
  }
  node_->grad_buffer()[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }

  if (!retain_graph) {
    for (auto* n : order) {
      if (!n->is_leaf()) {
        n->consumed = true;
        n->backward_fn = nullptr;
        n->parents.clear();
      }
    }
  }
}

}  // namespace clmex
