#pragma once

#include <cmath>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "opd/error.hpp"
#include "opd/net.hpp"
#include "opd/rng.hpp"
#include "opd/schedule.hpp"

namespace opd {

/// mu = x_coef * x + v_coef * v for the Euler-Maruyama step j.
struct StepCoefficients {
  double x_coef;
  double v_coef;
};

inline StepCoefficients step_coefficients(const Schedule& sched, std::size_t j) {
  const double t = sched.t(j);
  const double dt = sched.dt(j);
  const double s = sched.sigma(t);
  const double s2 = s * s;
  return {1.0 + s2 * dt / (2.0 * t), (1.0 + s2 * (1.0 - t) / (2.0 * t)) * dt};
}

/// Rollouts of one condition recorded in lockstep. states[j] holds x_{t_j}
/// for every trajectory (one column each); noises[j] holds eps_j and is empty
/// for deterministic (a = 0) rollouts.
struct TrajectoryBatch {
  int cond = 0;
  std::vector<Batch> states;
  std::vector<Batch> noises;

  int batch_size() const { return states.empty() ? 0 : states.front().cols; }
  int dim() const { return states.empty() ? 0 : states.front().rows; }
  std::size_t n_steps() const { return states.empty() ? 0 : states.size() - 1; }
  bool has_noises() const { return !noises.empty(); }
  const Batch& terminal() const { return states.back(); }
};

/// Mean of the one-step Gaussian kernel for a batch of states and velocities.
inline Batch transition_mean(const Batch& x, const Batch& v, const Schedule& sched, std::size_t j) {
  const auto k = step_coefficients(sched, j);
  Batch mu(x.rows, x.cols);
  for (std::size_t i = 0; i < mu.data.size(); ++i) mu.data[i] = k.x_coef * x.data[i] + k.v_coef * v.data[i];
  return mu;
}

inline std::vector<double> transition_mean(const VelocityField& vf, std::span<const double> x,
                                           std::size_t j, const Schedule& sched, int c) {
  const auto v = vf.forward(x, sched.t(j), c);
  const auto k = step_coefficients(sched, j);
  std::vector<double> mu(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) mu[i] = k.x_coef * x[i] + k.v_coef * v[i];
  return mu;
}

inline std::vector<double> sde_step(const VelocityField& vf, std::span<const double> x, std::size_t j,
                                    const Schedule& sched, int c, std::span<const double> eps) {
  require(eps.size() == x.size(), "noise has wrong dimension");
  auto next = transition_mean(vf, x, j, sched, c);
  const double sd = std::sqrt(sched.step_variance(j));
  for (std::size_t i = 0; i < next.size(); ++i) next[i] += sd * eps[i];
  return next;
}

/// Plain Euler step x + v * dt, independent of the noise level.
inline std::vector<double> ode_step(const VelocityField& vf, std::span<const double> x, std::size_t j,
                                    const Schedule& sched, int c) {
  const auto v = vf.forward(x, sched.t(j), c);
  const double dt = sched.dt(j);
  std::vector<double> next(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) next[i] = x[i] + v[i] * dt;
  return next;
}

/// Isotropic Gaussian log-density log N(a_next; mu, var * I).
inline double log_transition_density(std::span<const double> mu, double var, std::span<const double> a_next) {
  if (!(var > 0.0)) throw InvalidArgument("log_transition_density needs var > 0 (deterministic kernels have no density)");
  require(mu.size() == a_next.size(), "dimension mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double r = a_next[i] - mu[i];
    sq += r * r;
  }
  const double d = static_cast<double>(mu.size());
  return -0.5 * d * std::log(2.0 * std::numbers::pi * var) - sq / (2.0 * var);
}

inline void check_finite_state(const Batch& x, std::size_t j) {
  for (double v : x.data)
    if (!std::isfinite(v)) throw NumericError("non-finite state at step " + std::to_string(j));
}

/// Rolls out n trajectories of condition c from x_{t_0} ~ N(0, I). Uses the
/// SDE step when the schedule has a > 0 and the Euler step otherwise. Only
/// network values are computed; nothing is kept for differentiation.
inline TrajectoryBatch rollout_batch(const VelocityField& vf, const Schedule& sched, int c, int n, Rng& rng,
                                     bool record = true, long* forward_evals = nullptr) {
  require(n >= 1, "rollout batch must be non-empty");
  const int d = vf.dim();
  const std::size_t steps = sched.n_steps();
  const bool stochastic = !sched.deterministic();
  TrajectoryBatch out;
  out.cond = c;

  Batch x(d, n);
  for (double& v : x.data) v = rng.normal();
  if (record) out.states.push_back(x);

  const int cs[1] = {c};
  for (std::size_t j = 0; j < steps; ++j) {
    const double ts[1] = {sched.t(j)};
    const Batch v = vf.forward(x, ts, cs);
    if (forward_evals) *forward_evals += n;
    Batch next = transition_mean(x, v, sched, j);
    if (stochastic) {
      Batch eps(d, n);
      for (double& e : eps.data) e = rng.normal();
      const double sd = std::sqrt(sched.step_variance(j));
      for (std::size_t i = 0; i < next.data.size(); ++i) next.data[i] += sd * eps.data[i];
      if (record) out.noises.push_back(std::move(eps));
    }
    check_finite_state(next, j);
    x = std::move(next);
    if (record) out.states.push_back(x);
  }
  if (!record) out.states.push_back(std::move(x));
  return out;
}

inline TrajectoryBatch rollout(const VelocityField& vf, const Schedule& sched, int c, Rng& rng, bool record = true) {
  return rollout_batch(vf, sched, c, 1, rng, record);
}

/// Extracts column b of a batch as a vector.
inline std::vector<double> column(const Batch& x, int b) { return {x.col(b), x.col(b) + x.rows}; }

/// Debug dump: one JSON object per (trajectory, step).
inline void write_trajectory_jsonl(std::ostream& os, const TrajectoryBatch& traj, const Schedule& sched) {
  auto vec = [&](const double* p, int n) {
    os << '[';
    for (int i = 0; i < n; ++i) os << (i ? "," : "") << p[i];
    os << ']';
  };
  os.precision(17);
  for (int b = 0; b < traj.batch_size(); ++b) {
    for (std::size_t j = 0; j < traj.states.size(); ++j) {
      os << "{\"traj\":" << b << ",\"step\":" << j << ",\"t\":" << sched.t(j) << ",\"cond\":" << traj.cond
         << ",\"state\":";
      vec(traj.states[j].col(b), traj.dim());
      if (traj.has_noises() && j < traj.noises.size()) {
        os << ",\"noise\":";
        vec(traj.noises[j].col(b), traj.dim());
      }
      os << "}\n";
    }
  }
}

}  // namespace opd
