#pragma once

// Reverse-mode autodiff on a tape of Eigen matrices, templated on the scalar
// type. Training instantiates float for speed; gradient checks instantiate
// double so finite differences are trustworthy.
//
// Usage pattern: build a Graph per step, create leaves from master parameter
// matrices, compose ops (see ops.hpp), call backward() on a 1x1 result, read
// gradients back, destroy the graph. Nodes are appended in topological order,
// so the backward sweep is a single reverse iteration.

#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rtflow/common.hpp"

namespace rtflow {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
class Graph;

// Lightweight handle to a node on some graph. Copyable; does not own.
template <typename S>
struct Var {
  Graph<S>* g = nullptr;
  int id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Mat<S>& val() const { return g->value(id); }
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  // Scalar convenience for 1x1 results.
  S item() const {
    const Mat<S>& v = val();
    if (v.rows() != 1 || v.cols() != 1)
      throw InvalidInput("Var::item: node is not 1x1");
    return v(0, 0);
  }
  bool requires_grad() const { return g->node_requires_grad(id); }
};

template <typename S>
class Graph {
 public:
  using M = Mat<S>;
  using BackFn = std::function<void(Graph&, int)>;

  // When false, ops run forward-only: no closures are stored and results do
  // not require grad. Used for frozen branches (e.g. the clean branch of a
  // consistency loss) where only values matter.
  bool recording = true;

  Var<S> leaf(M v, bool requires_grad = true) {
    return make(std::move(v), requires_grad && recording, nullptr);
  }
  Var<S> constant(M v) { return make(std::move(v), false, nullptr); }
  Var<S> scalar(S v) {
    M m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // Internal: append a node. `back` may be null for leaves/constants.
  Var<S> make(M v, bool requires_grad, BackFn back) {
    nodes_.push_back(Node{std::move(v), M(), std::move(back), requires_grad});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const M& value(int id) const { return nodes_[id].value; }
  M& mutable_value(int id) { return nodes_[id].value; }
  bool node_requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient buffer, allocated (zeroed) on first access.
  M& grad_ref(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }
  // Gradient of a var after backward(); zeros if the node was never reached.
  M grad(const Var<S>& v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Reverse sweep from a 1x1 root. Gradients accumulate across repeated
  // calls; typical usage is one call per graph.
  void backward(const Var<S>& root) {
    if (root.g != this) throw InvalidInput("backward: var from another graph");
    const M& rv = nodes_[root.id].value;
    if (rv.rows() != 1 || rv.cols() != 1)
      throw InvalidInput("backward: root must be 1x1");
    if (!nodes_[root.id].requires_grad)
      throw InvalidInput("backward: root does not require grad");
    grad_ref(root.id)(0, 0) += S(1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.back || n.grad.size() == 0) continue;
      n.back(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M value;
    M grad;  // empty until touched
    BackFn back;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

namespace detail {

// Helper shared by ops: should the result record a backward closure?
template <typename S>
inline bool track(Graph<S>& g, std::initializer_list<const Var<S>*> parents) {
  if (!g.recording) return false;
  for (const Var<S>* p : parents)
    if (p->requires_grad()) return true;
  return false;
}

template <typename S>
inline void check_same_graph(const Var<S>& a, const Var<S>& b) {
  if (a.g != b.g) throw InvalidInput("op: vars belong to different graphs");
}

}  // namespace detail

}  // namespace rtflow
