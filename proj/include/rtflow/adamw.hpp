#pragma once

// Decoupled weight-decay Adam. Parameters are identified positionally, so
// callers must pass the same parameter list in the same order every step
// (models expose a stable visit order for exactly this reason).

#include <cmath>
#include <vector>

#include "rtflow/graph.hpp"

namespace rtflow {

template <typename S>
struct AdamWConfig {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0.01);
};

template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig<S> cfg = {}) : cfg_(cfg) {}

  // One update. `params[i]` is adjusted in place using `grads[i]`.
  void step(const std::vector<Mat<S>*>& params,
            const std::vector<Mat<S>>& grads) {
    if (params.size() != grads.size())
      throw InvalidInput("AdamW::step: param/grad count mismatch");
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.push_back(Mat<S>::Zero(p->rows(), p->cols()));
        v_.push_back(Mat<S>::Zero(p->rows(), p->cols()));
      }
    }
    if (m_.size() != params.size())
      throw InvalidInput("AdamW::step: parameter count changed between steps");
    ++t_;
    const S bc1 = S(1) - S(std::pow(static_cast<double>(cfg_.beta1), t_));
    const S bc2 = S(1) - S(std::pow(static_cast<double>(cfg_.beta2), t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Mat<S>& p = *params[i];
      const Mat<S>& g = grads[i];
      if (p.rows() != g.rows() || p.cols() != g.cols())
        throw InvalidInput("AdamW::step: grad shape mismatch");
      m_[i] = cfg_.beta1 * m_[i] + (S(1) - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i].array().matrix() +
              (S(1) - cfg_.beta2) * g.cwiseProduct(g);
      // Decoupled decay: applied directly to the parameter, not the gradient.
      p.array() -= cfg_.lr * cfg_.weight_decay * p.array();
      p.array() -= cfg_.lr * (m_[i].array() / bc1) /
                   ((v_[i].array() / bc2).sqrt() + cfg_.eps);
    }
  }

  int iterations() const { return t_; }
  const AdamWConfig<S>& config() const { return cfg_; }

 private:
  AdamWConfig<S> cfg_;
  std::vector<Mat<S>> m_, v_;
  int t_ = 0;
};

}  // namespace rtflow
