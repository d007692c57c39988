#ifndef VOLMIL_GRAPH_HPP_
#define VOLMIL_GRAPH_HPP_

#include "volmil/parameters.hpp"
#include "volmil/rng.hpp"
#include "volmil/tensor.hpp"

#include <deque>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

namespace volmil {

enum class Mode { train, eval };

template <typename T>
class Graph;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::function<void()> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, Node<T>* node) : graph_(graph), node_(node) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  /// Gradient after Graph::backward; zeros if nothing flowed here.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }

  Graph<T>& graph() const { return *graph_; }
  Node<T>* node() const { return node_; }
  bool valid() const { return node_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  Node<T>* node_ = nullptr;
};

/// Reverse-mode tape.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward is a single reverse sweep. Parameters are bound once per graph;
/// their leaf gradients are added into Parameter::grad at the end of
/// backward().
template <typename T>
class Graph {
 public:
  explicit Graph(Mode mode = Mode::train, std::uint64_t seed = 0) : mode_(mode), rng_(seed) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return mode_ == Mode::train; }
  Mode mode() const { return mode_; }
  Rng& rng() { return rng_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true); }

  /// Leaf bound to a parameter. Frozen parameters become constants.
  Var<T> param(Parameter<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var<T> v = push(p.value, p.trainable);
    bound_.emplace(&p, v);
    if (p.trainable) sinks_.push_back({&p, v.node()});
    return v;
  }

  /// Creates an interior node. `backward` is only kept when some parent
  /// requires a gradient; it may then read `out->grad`.
  template <typename F>
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, F&& make_backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    Var<T> out = push(std::move(value), needs);
    if (needs) out.node()->backward = make_backward(out.node());
    return out;
  }
  template <typename F>
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, F&& make_backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    Var<T> out = push(std::move(value), needs);
    if (needs) out.node()->backward = make_backward(out.node());
    return out;
  }

  /// Backpropagates from a scalar (size-1) node.
  void backward(const Var<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward requires a scalar loss");
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer().fill(T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && !n.grad.empty()) n.backward();
    }
    for (auto& [param, node] : sinks_)
      if (!node->grad.empty()) param->grad.vec() += node->grad.vec();
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  Var<T> push(Tensor<T> value, bool requires_grad) {
    auto n = std::make_unique<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.back().get());
  }

  struct Sink {
    Parameter<T>* param;
    Node<T>* node;
  };

  Mode mode_;
  Rng rng_;
  std::vector<std::unique_ptr<Node<T>>> nodes_;
  std::unordered_map<const Parameter<T>*, Var<T>> bound_;
  std::vector<Sink> sinks_;
};

/// Adds `delta` into a parent's gradient when the parent needs one.
template <typename T, typename Expr>
inline void accumulate(Node<T>* parent, const Expr& delta) {
  if (parent->requires_grad) parent->grad_buffer().vec() += delta;
}

}  // namespace volmil

#endif  // VOLMIL_GRAPH_HPP_
