#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "opd/error.hpp"

namespace opd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping
};

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

class Adam {
 public:
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  /// Applies one update in place and returns the L2 norm of the applied step.
  double step(std::span<double> params, std::span<const double> grad, double lr_scale = 1.0) {
    require(params.size() == m_.size() && grad.size() == m_.size(), "optimizer size mismatch");
    ++t_;
    double scale = 1.0;
    if (cfg_.max_grad_norm > 0.0) {
      const double g = l2_norm(grad);
      if (g > cfg_.max_grad_norm) scale = cfg_.max_grad_norm / g;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const double lr = cfg_.lr * lr_scale;
    double sq = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double g = grad[k] * scale;
      m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g;
      v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g * g;
      const double upd = lr * (m_[k] / bc1) / (std::sqrt(v_[k] / bc2) + cfg_.eps);
      params[k] -= upd;
      sq += upd * upd;
    }
    return std::sqrt(sq);
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

}  // namespace opd
