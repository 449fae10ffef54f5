#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "opd/error.hpp"

namespace opd {

/// Discretized reverse-time grid 1 = t_0 > t_1 > ... > t_N = 0 plus the
/// scalars of the SDE diffusion coefficient sigma_t = a * sqrt(t / (1 - t)).
///
/// sigma_t has a pole at t = 1 (the first grid point); evaluations clamp t to
/// t_clamp_max before forming the ratio.
class Schedule {
 public:
  static constexpr double kDefaultClampMax = 1.0 - 1e-3;

  Schedule(std::vector<double> times, double noise_level, double t_clamp_max = kDefaultClampMax)
      : times_(std::move(times)), noise_level_(noise_level), t_clamp_max_(t_clamp_max) {
    require(times_.size() >= 2, "schedule needs at least one step");
    require(times_.front() == 1.0 && times_.back() == 0.0, "schedule must run from t=1 to t=0");
    for (std::size_t j = 0; j + 1 < times_.size(); ++j)
      require(times_[j + 1] < times_[j], "schedule times must be strictly decreasing");
    require(noise_level_ >= 0.0 && std::isfinite(noise_level_), "noise level must be finite and >= 0");
    require(t_clamp_max_ > 0.0 && t_clamp_max_ < 1.0, "t_clamp_max must lie in (0,1)");
  }

  std::size_t n_steps() const { return times_.size() - 1; }
  const std::vector<double>& times() const { return times_; }
  double noise_level() const { return noise_level_; }
  double t_clamp_max() const { return t_clamp_max_; }
  bool deterministic() const { return noise_level_ == 0.0; }

  double t(std::size_t j) const { return times_.at(j); }

  double dt(std::size_t j) const {
    check_step(j);
    return times_[j + 1] - times_[j];
  }

  double sigma(double t) const {
    if (noise_level_ == 0.0) return 0.0;
    const double tc = std::min(t, t_clamp_max_);
    return noise_level_ * std::sqrt(tc / (1.0 - tc));
  }

  /// Per-step variance sigma_{t_j}^2 * (-dt_j) of the one-step Gaussian kernel.
  double step_variance(std::size_t j) const {
    check_step(j);
    const double s = sigma(times_[j]);
    return s * s * -(times_[j + 1] - times_[j]);
  }

  /// Same grid, different noise level.
  Schedule with_noise_level(double a) const { return Schedule(times_, a, t_clamp_max_); }

  friend bool operator==(const Schedule&, const Schedule&) = default;

 private:
  void check_step(std::size_t j) const {
    if (j >= n_steps())
      throw InvalidArgument("step index " + std::to_string(j) + " out of range [0," +
                            std::to_string(n_steps()) + ")");
  }

  std::vector<double> times_;
  double noise_level_;
  double t_clamp_max_;
};

inline Schedule make_uniform_schedule(std::size_t n_steps, double noise_level,
                                      double t_clamp_max = Schedule::kDefaultClampMax) {
  require(n_steps >= 1, "n_steps must be >= 1");
  std::vector<double> times(n_steps + 1);
  for (std::size_t j = 0; j <= n_steps; ++j)
    times[j] = 1.0 - static_cast<double>(j) / static_cast<double>(n_steps);
  times.back() = 0.0;
  return Schedule(std::move(times), noise_level, t_clamp_max);
}

}  // namespace opd
