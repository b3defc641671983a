#pragma once

// Differentiable operations on Graph/Var. Conventions:
//  * operator* is matrix product (Eigen-style); cmul/cdiv are elementwise.
//  * Backward closures capture parent ids only and read values from the
//    graph at backward time; gradients accumulate only into nodes that
//    require grad.
//  * Shape errors throw InvalidInput at op construction time.

#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "rtflow/graph.hpp"

namespace rtflow {

// ---------------------------------------------------------------- arithmetic

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  Graph<S>& g = *a.g;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput("add: shape mismatch");
  Mat<S> v = a.val() + b.val();
  if (!detail::track(g, {&a, &b})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, bi = b.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai)) gg.grad_ref(ai) += G;
    if (gg.node_requires_grad(bi)) gg.grad_ref(bi) += G;
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  Graph<S>& g = *a.g;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput("sub: shape mismatch");
  Mat<S> v = a.val() - b.val();
  if (!detail::track(g, {&a, &b})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, bi = b.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai)) gg.grad_ref(ai) += G;
    if (gg.node_requires_grad(bi)) gg.grad_ref(bi) -= G;
  });
}

// Elementwise product.
template <typename S>
Var<S> cmul(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  Graph<S>& g = *a.g;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput("cmul: shape mismatch");
  Mat<S> v = a.val().cwiseProduct(b.val());
  if (!detail::track(g, {&a, &b})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, bi = b.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai))
      gg.grad_ref(ai) += G.cwiseProduct(gg.value(bi));
    if (gg.node_requires_grad(bi))
      gg.grad_ref(bi) += G.cwiseProduct(gg.value(ai));
  });
}

// Elementwise quotient.
template <typename S>
Var<S> cdiv(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  Graph<S>& g = *a.g;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput("cdiv: shape mismatch");
  Mat<S> v = a.val().cwiseQuotient(b.val());
  if (!detail::track(g, {&a, &b})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, bi = b.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai))
      gg.grad_ref(ai) += G.cwiseQuotient(gg.value(bi));
    if (gg.node_requires_grad(bi))
      gg.grad_ref(bi) -=
          G.cwiseProduct(gg.value(self).cwiseQuotient(gg.value(bi)));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val() * c;
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, c](Graph<S>& gg, int self) {
    if (gg.node_requires_grad(ai)) gg.grad_ref(ai) += gg.grad_ref(self) * c;
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().array() + c;
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (gg.node_requires_grad(ai)) gg.grad_ref(ai) += gg.grad_ref(self);
  });
}

template <typename S>
Var<S> neg(Var<S> a) {
  return scale(a, S(-1));
}

// Matrix product.
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  Graph<S>& g = *a.g;
  if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dims mismatch");
  Mat<S> v = a.val() * b.val();
  if (!detail::track(g, {&a, &b})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, bi = b.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai))
      gg.grad_ref(ai).noalias() += G * gg.value(bi).transpose();
    if (gg.node_requires_grad(bi))
      gg.grad_ref(bi).noalias() += gg.value(ai).transpose() * G;
  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().transpose();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (gg.node_requires_grad(ai))
      gg.grad_ref(ai) += gg.grad_ref(self).transpose();
  });
}

// ------------------------------------------------------- elementwise maps

template <typename S>
Var<S> relu(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().cwiseMax(S(0));
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const Mat<S>& G = gg.grad_ref(self);
    gg.grad_ref(ai).array() +=
        G.array() * (gg.value(ai).array() > S(0)).template cast<S>();
  });
}

// Tanh-approximated GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
  Graph<S>& g = *a.g;
  const S k = S(std::sqrt(2.0 / std::numbers::pi));
  const S c3 = S(0.044715);
  Mat<S> x = a.val();
  Mat<S> v = (S(0.5) * x.array() *
              (S(1) + ((k * (x.array() + c3 * x.array().cube())).tanh())))
                 .matrix();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, k, c3](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const auto x = gg.value(ai).array();
    const auto t = (k * (x + c3 * x.cube())).tanh();
    const auto du = k * (S(1) + S(3) * c3 * x.square());
    const auto d = S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t.square()) * du;
    gg.grad_ref(ai).array() += gg.grad_ref(self).array() * d;
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = (S(1) / (S(1) + (-a.val().array()).exp())).matrix();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const auto y = gg.value(self).array();
    gg.grad_ref(ai).array() += gg.grad_ref(self).array() * y * (S(1) - y);
  });
}

template <typename S>
Var<S> tanh_op(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().array().tanh().matrix();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const auto y = gg.value(self).array();
    gg.grad_ref(ai).array() += gg.grad_ref(self).array() * (S(1) - y.square());
  });
}

template <typename S>
Var<S> exp_op(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().array().exp().matrix();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).array() +=
        gg.grad_ref(self).array() * gg.value(self).array();
  });
}

template <typename S>
Var<S> log_op(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().array().log().matrix();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).array() +=
        gg.grad_ref(self).array() / gg.value(ai).array();
  });
}

template <typename S>
Var<S> sqrt_op(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().array().sqrt().matrix();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).array() +=
        gg.grad_ref(self).array() * (S(0.5) / gg.value(self).array());
  });
}

template <typename S>
Var<S> abs_op(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().cwiseAbs();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const auto x = gg.value(ai).array();
    gg.grad_ref(ai).array() +=
        gg.grad_ref(self).array() * x.sign();
  });
}

template <typename S>
Var<S> square(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().array().square().matrix();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).array() +=
        S(2) * gg.grad_ref(self).array() * gg.value(ai).array();
  });
}

// Elementwise power with a constant exponent; inputs must be positive when
// the exponent is non-integral.
template <typename S>
Var<S> pow_scalar(Var<S> a, S e) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().array().pow(e).matrix();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, e](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).array() += gg.grad_ref(self).array() * e *
                               gg.value(ai).array().pow(e - S(1));
  });
}

// -------------------------------------------------------------- reductions

template <typename S>
Var<S> sum_all(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v(1, 1);
  v(0, 0) = a.val().sum();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).array() += gg.grad_ref(self)(0, 0);
  });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  Graph<S>& g = *a.g;
  const S inv = S(1) / S(a.val().size());
  Mat<S> v(1, 1);
  v(0, 0) = a.val().sum() * inv;
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, inv](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).array() += gg.grad_ref(self)(0, 0) * inv;
  });
}

template <typename S>
Var<S> rowwise_sum(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().rowwise().sum();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).colwise() += gg.grad_ref(self).col(0);
  });
}

template <typename S>
Var<S> rowwise_mean(Var<S> a) {
  return scale(rowwise_sum(a), S(1) / S(a.cols()));
}

template <typename S>
Var<S> colwise_sum(Var<S> a) {
  Graph<S>& g = *a.g;
  Mat<S> v = a.val().colwise().sum();
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).rowwise() += gg.grad_ref(self).row(0);
  });
}

template <typename S>
Var<S> colwise_mean(Var<S> a) {
  return scale(colwise_sum(a), S(1) / S(a.rows()));
}

// Sum of the elementwise product; the building block for dot products and
// cosine similarities on arbitrarily shaped values.
template <typename S>
Var<S> dot_all(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  Graph<S>& g = *a.g;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput("dot_all: shape mismatch");
  Mat<S> v(1, 1);
  v(0, 0) = a.val().cwiseProduct(b.val()).sum();
  if (!detail::track(g, {&a, &b})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, bi = b.id](Graph<S>& gg, int self) {
    const S G = gg.grad_ref(self)(0, 0);
    if (gg.node_requires_grad(ai)) gg.grad_ref(ai) += G * gg.value(bi);
    if (gg.node_requires_grad(bi)) gg.grad_ref(bi) += G * gg.value(ai);
  });
}

// ------------------------------------------------- broadcasting over rows/cols

// out(i,j) = a(i,j) + v(i); v is r x 1.
template <typename S>
Var<S> add_colvec(Var<S> a, Var<S> v) {
  detail::check_same_graph(a, v);
  Graph<S>& g = *a.g;
  if (v.cols() != 1 || v.rows() != a.rows())
    throw InvalidInput("add_colvec: v must be rows(a) x 1");
  Mat<S> out = a.val();
  out.colwise() += v.val().col(0);
  if (!detail::track(g, {&a, &v})) return g.constant(std::move(out));
  return g.make(std::move(out), true, [ai = a.id, vi = v.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai)) gg.grad_ref(ai) += G;
    if (gg.node_requires_grad(vi)) gg.grad_ref(vi).col(0) += G.rowwise().sum();
  });
}

// out(i,j) = a(i,j) + v(j); v is 1 x c.
template <typename S>
Var<S> add_rowvec(Var<S> a, Var<S> v) {
  detail::check_same_graph(a, v);
  Graph<S>& g = *a.g;
  if (v.rows() != 1 || v.cols() != a.cols())
    throw InvalidInput("add_rowvec: v must be 1 x cols(a)");
  Mat<S> out = a.val();
  out.rowwise() += v.val().row(0);
  if (!detail::track(g, {&a, &v})) return g.constant(std::move(out));
  return g.make(std::move(out), true, [ai = a.id, vi = v.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai)) gg.grad_ref(ai) += G;
    if (gg.node_requires_grad(vi)) gg.grad_ref(vi).row(0) += G.colwise().sum();
  });
}

// out(i,j) = a(i,j) * v(i); v is r x 1.
template <typename S>
Var<S> mul_colvec(Var<S> a, Var<S> v) {
  detail::check_same_graph(a, v);
  Graph<S>& g = *a.g;
  if (v.cols() != 1 || v.rows() != a.rows())
    throw InvalidInput("mul_colvec: v must be rows(a) x 1");
  Mat<S> out = (a.val().array().colwise() * v.val().col(0).array()).matrix();
  if (!detail::track(g, {&a, &v})) return g.constant(std::move(out));
  return g.make(std::move(out), true, [ai = a.id, vi = v.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai))
      gg.grad_ref(ai).array() +=
          G.array().colwise() * gg.value(vi).col(0).array();
    if (gg.node_requires_grad(vi))
      gg.grad_ref(vi).col(0) +=
          G.cwiseProduct(gg.value(ai)).rowwise().sum();
  });
}

// out(i,j) = a(i,j) * v(j); v is 1 x c.
template <typename S>
Var<S> mul_rowvec(Var<S> a, Var<S> v) {
  detail::check_same_graph(a, v);
  Graph<S>& g = *a.g;
  if (v.rows() != 1 || v.cols() != a.cols())
    throw InvalidInput("mul_rowvec: v must be 1 x cols(a)");
  Mat<S> out = (a.val().array().rowwise() * v.val().row(0).array()).matrix();
  if (!detail::track(g, {&a, &v})) return g.constant(std::move(out));
  return g.make(std::move(out), true, [ai = a.id, vi = v.id](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    if (gg.node_requires_grad(ai))
      gg.grad_ref(ai).array() +=
          G.array().rowwise() * gg.value(vi).row(0).array();
    if (gg.node_requires_grad(vi))
      gg.grad_ref(vi).row(0) +=
          G.cwiseProduct(gg.value(ai)).colwise().sum();
  });
}

// ------------------------------------------------------- slicing / stacking

template <typename S>
Var<S> slice_rows(Var<S> a, int r0, int nr) {
  Graph<S>& g = *a.g;
  if (r0 < 0 || nr < 0 || r0 + nr > a.rows())
    throw InvalidInput("slice_rows: range out of bounds");
  Mat<S> v = a.val().middleRows(r0, nr);
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, r0, nr](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).middleRows(r0, nr) += gg.grad_ref(self);
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, int c0, int nc) {
  Graph<S>& g = *a.g;
  if (c0 < 0 || nc < 0 || c0 + nc > a.cols())
    throw InvalidInput("slice_cols: range out of bounds");
  Mat<S> v = a.val().middleCols(c0, nc);
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, c0, nc](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    gg.grad_ref(ai).middleCols(c0, nc) += gg.grad_ref(self);
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw InvalidInput("concat_rows: no inputs");
  Graph<S>& g = *parts[0].g;
  Eigen::Index cols = parts[0].cols(), rows = 0;
  for (const auto& p : parts) {
    detail::check_same_graph(parts[0], p);
    if (p.cols() != cols) throw InvalidInput("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat<S> v(rows, cols);
  Eigen::Index r = 0;
  std::vector<std::pair<int, std::pair<int, int>>> spans;  // id, (r0, nr)
  bool any_grad = false;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.val();
    spans.push_back({p.id, {static_cast<int>(r), static_cast<int>(p.rows())}});
    any_grad = any_grad || p.requires_grad();
    r += p.rows();
  }
  if (!g.recording || !any_grad) return g.constant(std::move(v));
  return g.make(std::move(v), true, [spans](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    for (const auto& [id, span] : spans)
      if (gg.node_requires_grad(id))
        gg.grad_ref(id) += G.middleRows(span.first, span.second);
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw InvalidInput("concat_cols: no inputs");
  Graph<S>& g = *parts[0].g;
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    detail::check_same_graph(parts[0], p);
    if (p.rows() != rows) throw InvalidInput("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat<S> v(rows, cols);
  Eigen::Index c = 0;
  std::vector<std::pair<int, std::pair<int, int>>> spans;
  bool any_grad = false;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.val();
    spans.push_back({p.id, {static_cast<int>(c), static_cast<int>(p.cols())}});
    any_grad = any_grad || p.requires_grad();
    c += p.cols();
  }
  if (!g.recording || !any_grad) return g.constant(std::move(v));
  return g.make(std::move(v), true, [spans](Graph<S>& gg, int self) {
    const Mat<S>& G = gg.grad_ref(self);
    for (const auto& [id, span] : spans)
      if (gg.node_requires_grad(id))
        gg.grad_ref(id) += G.middleCols(span.first, span.second);
  });
}

// out row k = a row idx[k]; idx[k] == -1 yields a zero row. The classic
// embedding lookup; backward scatter-adds.
template <typename S>
Var<S> gather_rows(Var<S> a, std::shared_ptr<const std::vector<int>> idx) {
  Graph<S>& g = *a.g;
  const Eigen::Index cols = a.cols();
  Mat<S> v = Mat<S>::Zero(idx->size(), cols);
  for (std::size_t k = 0; k < idx->size(); ++k) {
    int i = (*idx)[k];
    if (i >= a.rows()) throw InvalidInput("gather_rows: index out of range");
    if (i >= 0) v.row(k) = a.val().row(i);
  }
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, idx](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const Mat<S>& G = gg.grad_ref(self);
    Mat<S>& GA = gg.grad_ref(ai);
    for (std::size_t k = 0; k < idx->size(); ++k) {
      int i = (*idx)[k];
      if (i >= 0) GA.row(i) += G.row(k);
    }
  });
}

// out col k = a col idx[k]; idx[k] == -1 yields a zero column.
template <typename S>
Var<S> gather_cols(Var<S> a, std::shared_ptr<const std::vector<int>> idx) {
  Graph<S>& g = *a.g;
  const Eigen::Index rows = a.rows();
  Mat<S> v = Mat<S>::Zero(rows, idx->size());
  for (std::size_t k = 0; k < idx->size(); ++k) {
    int i = (*idx)[k];
    if (i >= a.cols()) throw InvalidInput("gather_cols: index out of range");
    if (i >= 0) v.col(k) = a.val().col(i);
  }
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, idx](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const Mat<S>& G = gg.grad_ref(self);
    Mat<S>& GA = gg.grad_ref(ai);
    for (std::size_t k = 0; k < idx->size(); ++k) {
      int i = (*idx)[k];
      if (i >= 0) GA.col(i) += G.col(k);
    }
  });
}

// Value copy that blocks gradient flow.
template <typename S>
Var<S> stop_gradient(Var<S> a) {
  return a.g->constant(a.val());
}

// --------------------------------------------------------------- softmaxes

// Row-wise softmax. When `causal` the input must be square and row i only
// attends to columns 0..i; masked entries are exactly zero in the output.
template <typename S>
Var<S> softmax_rows(Var<S> a, bool causal = false) {
  Graph<S>& g = *a.g;
  const Eigen::Index R = a.rows(), C = a.cols();
  if (causal && R != C) throw InvalidInput("softmax_rows: causal needs square input");
  Mat<S> y = Mat<S>::Zero(R, C);
  for (Eigen::Index r = 0; r < R; ++r) {
    const Eigen::Index n = causal ? r + 1 : C;
    auto row = a.val().row(r).head(n);
    S m = row.maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (row.array() - m).exp();
    y.row(r).head(n) = (e / e.sum()).matrix();
  }
  if (!detail::track(g, {&a})) return g.constant(std::move(y));
  return g.make(std::move(y), true, [ai = a.id](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const Mat<S>& Y = gg.value(self);
    const Mat<S>& G = gg.grad_ref(self);
    Mat<S>& GA = gg.grad_ref(ai);
    for (Eigen::Index r = 0; r < Y.rows(); ++r) {
      // dx = y * (g - <g, y>); masked positions have y == 0, so they drop out.
      const S gy = G.row(r).cwiseProduct(Y.row(r)).sum();
      GA.row(r).array() += Y.row(r).array() * (G.row(r).array() - gy);
    }
  });
}

// Sum over selected rows t of -log softmax(logits.row(t))[ids[t]]. Rows where
// mask[t] == 0 contribute nothing (and get no gradient). The caller divides
// by its own token count. Numerically stabilized by row-max subtraction.
template <typename S>
Var<S> masked_ce_sum(Var<S> logits, std::shared_ptr<const std::vector<int>> ids,
                     std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  Graph<S>& g = *logits.g;
  const Eigen::Index T = logits.rows(), V = logits.cols();
  if (static_cast<Eigen::Index>(ids->size()) != T ||
      static_cast<Eigen::Index>(mask->size()) != T)
    throw InvalidInput("masked_ce_sum: ids/mask length must equal rows");
  auto probs = std::make_shared<Mat<S>>(Mat<S>::Zero(T, V));
  S total = S(0);
  for (Eigen::Index t = 0; t < T; ++t) {
    if (!(*mask)[t]) continue;
    const int id = (*ids)[t];
    if (id < 0 || id >= V) throw InvalidInput("masked_ce_sum: id out of range");
    auto row = logits.val().row(t);
    const S m = row.maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (row.array() - m).exp();
    const S z = e.sum();
    probs->row(t) = (e / z).matrix();
    total -= std::log((*probs)(t, id));
  }
  Mat<S> v(1, 1);
  v(0, 0) = total;
  if (!detail::track(g, {&logits})) return g.constant(std::move(v));
  return g.make(std::move(v), true,
                [li = logits.id, ids, mask, probs](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(li)) return;
    const S G = gg.grad_ref(self)(0, 0);
    Mat<S>& GL = gg.grad_ref(li);
    for (Eigen::Index t = 0; t < GL.rows(); ++t) {
      if (!(*mask)[t]) continue;
      GL.row(t) += G * probs->row(t);
      GL(t, (*ids)[t]) -= G;
    }
  });
}

// ------------------------------------------------------------ patch gather

// Precomputed sliding-window taps: output column j is the vertical stack of
// input columns idx(k, j) for k = 0..k_taps-1, with -1 meaning zero padding.
// Convolution over any geometry = matmul(weights, gather_patches(x, map)).
struct PatchIndexMap {
  int k_taps = 0;
  long n_in = 0;
  long n_out = 0;
  Eigen::ArrayXXi idx;  // k_taps x n_out
};

template <typename S>
Var<S> gather_patches(Var<S> a, std::shared_ptr<const PatchIndexMap> map) {
  Graph<S>& g = *a.g;
  if (a.cols() != map->n_in)
    throw InvalidInput("gather_patches: input column count mismatch");
  const Eigen::Index C = a.rows();
  Mat<S> v = Mat<S>::Zero(static_cast<Eigen::Index>(map->k_taps) * C, map->n_out);
  for (long j = 0; j < map->n_out; ++j)
    for (int k = 0; k < map->k_taps; ++k) {
      const int src = map->idx(k, j);
      if (src >= 0) v.block(static_cast<Eigen::Index>(k) * C, j, C, 1) = a.val().col(src);
    }
  if (!detail::track(g, {&a})) return g.constant(std::move(v));
  return g.make(std::move(v), true, [ai = a.id, map](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(ai)) return;
    const Mat<S>& G = gg.grad_ref(self);
    Mat<S>& GA = gg.grad_ref(ai);
    const Eigen::Index C = GA.rows();
    for (long j = 0; j < map->n_out; ++j)
      for (int k = 0; k < map->k_taps; ++k) {
        const int src = map->idx(k, j);
        if (src >= 0) GA.col(src) += G.block(static_cast<Eigen::Index>(k) * C, j, C, 1);
      }
  });
}

// ------------------------------------------------------------- fused losses

// Mean binary cross-entropy over all elements, computed from logits with the
// usual max/log1p stabilization. Targets are plain data (never need grads).
template <typename S>
Var<S> bce_with_logits_mean(Var<S> logits, const Mat<S>& targets) {
  Graph<S>& g = *logits.g;
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
    throw InvalidInput("bce_with_logits_mean: shape mismatch");
  const auto z = logits.val().array();
  const auto y = targets.array();
  const S inv = S(1) / S(targets.size());
  Mat<S> v(1, 1);
  v(0, 0) = ((z.max(S(0)) - z * y + (S(1) + (-z.abs()).exp()).log()).sum()) * inv;
  if (!detail::track(g, {&logits})) return g.constant(std::move(v));
  auto ty = std::make_shared<Mat<S>>(targets);
  return g.make(std::move(v), true, [li = logits.id, ty, inv](Graph<S>& gg, int self) {
    if (!gg.node_requires_grad(li)) return;
    const S G = gg.grad_ref(self)(0, 0);
    const auto z = gg.value(li).array();
    gg.grad_ref(li).array() +=
        (G * inv) * (S(1) / (S(1) + (-z).exp()) - ty->array());
  });
}

// --------------------------------------------------------- compositions

// Per-row RMS normalization: x / sqrt(mean(x^2) + eps).
template <typename S>
Var<S> rmsnorm_rows(Var<S> a, S eps = S(1e-5)) {
  Var<S> ms = rowwise_mean(square(a));
  Var<S> inv = pow_scalar(add_scalar(ms, eps), S(-0.5));
  return mul_colvec(a, inv);
}

// Per-row standardization (mean 0, variance 1): the per-channel core of
// instance normalization when rows are channels and columns are positions.
template <typename S>
Var<S> standardize_rows(Var<S> a, S eps = S(1e-5)) {
  Var<S> mu = rowwise_mean(a);
  Var<S> xc = add_colvec(a, neg(mu));
  Var<S> var = rowwise_mean(square(xc));
  Var<S> inv = pow_scalar(add_scalar(var, eps), S(-0.5));
  return mul_colvec(xc, inv);
}

// Cosine similarity of two same-shaped values viewed as flat vectors, with a
// small epsilon inside the norms to keep the quotient finite near zero.
template <typename S>
Var<S> cosine_sim_flat(Var<S> a, Var<S> b, S eps = S(1e-24)) {
  Var<S> num = dot_all(a, b);
  Var<S> na = sqrt_op(add_scalar(dot_all(a, a), eps));
  Var<S> nb = sqrt_op(add_scalar(dot_all(b, b), eps));
  return cdiv(num, cmul(na, nb));
}

// ------------------------------------------------------------- operators

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S>
Var<S> operator-(Var<S> a) { return neg(a); }
// Matrix product, as in Eigen.
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return matmul(a, b); }
template <typename S>
Var<S> operator*(S c, Var<S> a) { return scale(a, c); }
template <typename S>
Var<S> operator*(Var<S> a, S c) { return scale(a, c); }

}  // namespace rtflow
