#pragma once

// Finite-difference oracle for analytic gradients. Double precision only:
// central differences with h ~ 1e-5 give ~1e-10 truncation error, so a
// relative tolerance of 1e-6 cleanly separates correct from broken backward
// passes.

#include <vector>

#include "rtflow/graph.hpp"

namespace rtflow::testing {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

// `build` maps (Graph&, leaf vars) to a 1x1 loss var. Returns the maximum
// relative error between analytic and central-difference gradients over all
// entries of all leaves.
template <typename BuildFn>
double max_gradcheck_error(BuildFn&& build, std::vector<Mat<double>> masters,
                           double h = 1e-5) {
  auto eval = [&](bool with_grads, std::vector<Mat<double>>* grads_out) {
    Graph<double> g;
    g.recording = with_grads;
    std::vector<Var<double>> leaves;
    leaves.reserve(masters.size());
    for (auto& m : masters) leaves.push_back(g.leaf(m, true));
    Var<double> loss = build(g, leaves);
    const double value = loss.item();
    if (with_grads) {
      g.backward(loss);
      grads_out->clear();
      for (const auto& v : leaves) grads_out->push_back(g.grad(v));
    }
    return value;
  };

  std::vector<Mat<double>> analytic;
  eval(true, &analytic);

  double worst = 0.0;
  for (std::size_t p = 0; p < masters.size(); ++p) {
    Mat<double>& m = masters[p];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double orig = m(i, j);
        m(i, j) = orig + h;
        const double fp = eval(false, nullptr);
        m(i, j) = orig - h;
        const double fm = eval(false, nullptr);
        m(i, j) = orig;
        const double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, rel_err(analytic[p](i, j), fd));
      }
  }
  return worst;
}

}  // namespace rtflow::testing
