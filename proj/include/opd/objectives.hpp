#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "opd/autodiff.hpp"
#include "opd/error.hpp"
#include "opd/net.hpp"
#include "opd/rng.hpp"
#include "opd/sampler.hpp"
#include "opd/schedule.hpp"

namespace opd {

/// KL(N(mu1, var I) || N(mu2, var I)) = |mu1 - mu2|^2 / (2 var).
inline double gaussian_kl_same_cov(std::span<const double> mu1, std::span<const double> mu2, double var) {
  if (!(var > 0.0)) throw InvalidArgument("gaussian_kl_same_cov needs var > 0");
  require(mu1.size() == mu2.size(), "dimension mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < mu1.size(); ++i) {
    const double r = mu1[i] - mu2[i];
    sq += r * r;
  }
  return sq / (2.0 * var);
}

struct McEstimate {
  double estimate;
  double stderr;
};

/// Monte-Carlo KL: average of log p1(x) - log p2(x) over x ~ N(mu1, var I).
inline McEstimate mc_kl_oracle(std::span<const double> mu1, std::span<const double> mu2, double var,
                               long n_samples, Rng& rng) {
  require(n_samples >= 1000, "mc_kl_oracle needs at least 1000 samples");
  require(var > 0.0, "mc_kl_oracle needs var > 0");
  require(mu1.size() == mu2.size(), "dimension mismatch");
  const std::size_t d = mu1.size();
  const double sd = std::sqrt(var);
  std::vector<double> x(d);
  double mean = 0.0, m2 = 0.0;
  for (long n = 1; n <= n_samples; ++n) {
    for (std::size_t i = 0; i < d; ++i) x[i] = mu1[i] + sd * rng.normal();
    const double s = log_transition_density(mu1, var, x) - log_transition_density(mu2, var, x);
    const double delta = s - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (s - mean);
  }
  const double sample_var = m2 / static_cast<double>(n_samples - 1);
  return {mean, std::sqrt(sample_var / static_cast<double>(n_samples))};
}

/// Reductions applied when turning per-step terms into one loss.
struct LossReduction {
  bool divide_by_steps = false;  // sum over steps by default
};

namespace detail {

/// Student transition means at step j as tape variables, column-major d x B.
inline std::vector<Var> student_means(Tape& tape, const TrajectoryBatch& traj, const Schedule& sched,
                                      std::size_t j) {
  const Batch& x = traj.states[j];
  const double ts[1] = {sched.t(j)};
  const int cs[1] = {traj.cond};
  const NetOutput v = tape.call(x, ts, cs);
  const auto k = step_coefficients(sched, j);
  std::vector<Var> mu(x.data.size());
  for (int b = 0; b < x.cols; ++b)
    for (int i = 0; i < x.rows; ++i) mu[b * x.rows + i] = v(i, b) * k.v_coef + k.x_coef * x(i, b);
  return mu;
}

/// Teacher (or frozen snapshot) transition means at step j; plain values.
inline Batch frozen_means(const VelocityField& vf, const TrajectoryBatch& traj, const Schedule& sched,
                          std::size_t j) {
  const double ts[1] = {sched.t(j)};
  const int cs[1] = {traj.cond};
  return transition_mean(traj.states[j], vf.forward(traj.states[j], ts, cs), sched, j);
}

inline void check_trajectory(const TrajectoryBatch& traj, const Schedule& sched) {
  require(traj.n_steps() == sched.n_steps(), "trajectory length does not match schedule");
}

}  // namespace detail

/// Per-step squared mean mismatch |mu_S - mu_T|^2 summed over the batch
/// (not divided by the variance); used for diagnostics and the a -> 0 limit.
inline std::vector<double> mean_mismatch_per_step(const VelocityField& student, const VelocityField& teacher,
                                                  const TrajectoryBatch& traj, const Schedule& sched) {
  detail::check_trajectory(traj, sched);
  std::vector<double> out(sched.n_steps(), 0.0);
  for (std::size_t j = 0; j < sched.n_steps(); ++j) {
    const Batch ms = detail::frozen_means(student, traj, sched, j);
    const Batch mt = detail::frozen_means(teacher, traj, sched, j);
    for (std::size_t k = 0; k < ms.data.size(); ++k) out[j] += (ms.data[k] - mt.data[k]) * (ms.data[k] - mt.data[k]);
  }
  return out;
}

/// Closed-form on-policy KL: batch mean of sum_j |mu_S - mu_T|^2 / (2 var_j).
/// The teacher is treated as a constant.
inline Var opd_sde_loss(Tape& tape, const VelocityField& teacher, const TrajectoryBatch& traj,
                        const Schedule& sched, LossReduction red = {}, std::vector<double>* per_step = nullptr) {
  if (sched.deterministic()) throw InvalidArgument("opd_sde_loss needs a > 0; use opd_ode_loss for a = 0");
  detail::check_trajectory(traj, sched);
  const double inv_b = 1.0 / traj.batch_size();
  const double step_scale = red.divide_by_steps ? 1.0 / static_cast<double>(sched.n_steps()) : 1.0;
  Var total = tape.constant(0.0);
  if (per_step) per_step->assign(sched.n_steps(), 0.0);
  for (std::size_t j = 0; j < sched.n_steps(); ++j) {
    const double var = sched.step_variance(j);
    if (!(var > 0.0)) throw InvalidArgument("step variance vanished at step " + std::to_string(j));
    const auto mu_s = detail::student_means(tape, traj, sched, j);
    const Batch mu_t = detail::frozen_means(teacher, traj, sched, j);
    Var step = tape.constant(0.0);
    for (std::size_t k = 0; k < mu_s.size(); ++k) step = step + square(mu_s[k] - mu_t.data[k]);
    step = step * (inv_b * step_scale / (2.0 * var));
    if (per_step) (*per_step)[j] = step.value();
    total = total + step;
  }
  return total;
}

/// Deterministic-regime loss: batch mean of sum_j 1/2 |mu_S - mu_T|^2 with
/// mu = x + v dt.
inline Var opd_ode_loss(Tape& tape, const VelocityField& teacher, const TrajectoryBatch& traj,
                        const Schedule& sched, LossReduction red = {}, std::vector<double>* per_step = nullptr) {
  if (!sched.deterministic()) throw InvalidArgument("opd_ode_loss needs a = 0; use opd_sde_loss for a > 0");
  detail::check_trajectory(traj, sched);
  const double inv_b = 1.0 / traj.batch_size();
  const double step_scale = red.divide_by_steps ? 1.0 / static_cast<double>(sched.n_steps()) : 1.0;
  Var total = tape.constant(0.0);
  if (per_step) per_step->assign(sched.n_steps(), 0.0);
  for (std::size_t j = 0; j < sched.n_steps(); ++j) {
    const auto mu_s = detail::student_means(tape, traj, sched, j);
    const Batch mu_t = detail::frozen_means(teacher, traj, sched, j);
    Var step = tape.constant(0.0);
    for (std::size_t k = 0; k < mu_s.size(); ++k) step = step + square(mu_s[k] - mu_t.data[k]);
    step = step * (0.5 * inv_b * step_scale);
    if (per_step) (*per_step)[j] = step.value();
    total = total + step;
  }
  return total;
}

/// Closed-form per-step KL terms for a batch of states at step j, as tape
/// variables (one per column). The teacher is a constant.
inline std::vector<Var> kl_step_terms(Tape& tape, const VelocityField& teacher, const Batch& x, int cond,
                                      const Schedule& sched, std::size_t j) {
  const double var = sched.step_variance(j);
  if (!(var > 0.0)) throw InvalidArgument("step variance vanished at step " + std::to_string(j));
  TrajectoryBatch view;
  view.cond = cond;
  view.states.assign(j + 1, Batch());
  view.states[j] = x;
  const auto mu_s = detail::student_means(tape, view, sched, j);
  const Batch mu_t = detail::frozen_means(teacher, view, sched, j);
  std::vector<Var> out;
  for (int b = 0; b < x.cols; ++b) {
    Var acc = tape.constant(0.0);
    for (int i = 0; i < x.rows; ++i) {
      const std::size_t k = static_cast<std::size_t>(b) * x.rows + i;
      acc = acc + square(mu_s[k] - mu_t.data[k]);
    }
    out.push_back(acc / (2.0 * var));
  }
  return out;
}

/// Per-step clipped surrogate terms -min(rho A, clip(rho) A) with A = -KL(theta),
/// one per column. actions are the sampled next states.
inline std::vector<Var> ppo_step_terms(Tape& tape, const VelocityField& snapshot, const VelocityField& teacher,
                                       const Batch& x, const Batch& actions, int cond, const Schedule& sched,
                                       std::size_t j, double clip_eps, std::vector<double>* ratios = nullptr) {
  const double var = sched.step_variance(j);
  if (!(var > 0.0)) throw InvalidArgument("step variance vanished at step " + std::to_string(j));
  const int d = x.rows;
  const double log_norm = -0.5 * d * std::log(2.0 * std::numbers::pi * var);
  TrajectoryBatch view;
  view.cond = cond;
  view.states.assign(j + 1, Batch());
  view.states[j] = x;
  const auto mu_s = detail::student_means(tape, view, sched, j);
  const Batch mu_t = detail::frozen_means(teacher, view, sched, j);
  const Batch mu_old = detail::frozen_means(snapshot, view, sched, j);
  std::vector<Var> out;
  for (int b = 0; b < x.cols; ++b) {
    Var kl = tape.constant(0.0);
    Var resid = tape.constant(0.0);
    double resid_old = 0.0;
    for (int i = 0; i < d; ++i) {
      const std::size_t k = static_cast<std::size_t>(b) * d + i;
      kl = kl + square(mu_s[k] - mu_t.data[k]);
      resid = resid + square(actions.data[k] - mu_s[k]);
      resid_old += (actions.data[k] - mu_old.data[k]) * (actions.data[k] - mu_old.data[k]);
    }
    kl = kl / (2.0 * var);
    const Var log_pi = log_norm - resid / (2.0 * var);
    const double log_pi_old = log_norm - resid_old / (2.0 * var);
    const Var ratio = exp(log_pi - log_pi_old);
    if (ratios) ratios->push_back(ratio.value());
    const Var adv = -kl;
    out.push_back(-min(ratio * adv, clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv));
  }
  return out;
}

/// PPO-style clipped surrogate with per-step advantage A_j = -KL_j(theta),
/// summed over steps and averaged over the batch. Gradients flow through both
/// the ratio and the advantage. The actions are the recorded next states;
/// snapshot holds the parameters used to roll out.
inline Var ppo_surrogate_loss(Tape& tape, const VelocityField& snapshot, const VelocityField& teacher,
                              const TrajectoryBatch& traj, const Schedule& sched, double clip_eps,
                              LossReduction red = {}, std::vector<double>* ratios = nullptr) {
  if (!(clip_eps > 0.0)) throw InvalidArgument("clip_eps must be > 0");
  if (sched.deterministic()) throw InvalidArgument("ppo_surrogate_loss needs a stochastic policy (a > 0)");
  detail::check_trajectory(traj, sched);
  const double scale = (red.divide_by_steps ? 1.0 / static_cast<double>(sched.n_steps()) : 1.0) / traj.batch_size();
  Var total = tape.constant(0.0);
  if (ratios) ratios->clear();
  for (std::size_t j = 0; j < sched.n_steps(); ++j) {
    const auto terms = ppo_step_terms(tape, snapshot, teacher, traj.states[j], traj.states[j + 1], traj.cond, sched,
                                      j, clip_eps, ratios);
    for (const Var& t : terms) total = total + t * scale;
  }
  return total;
}

/// Score-function part of the PPO gradient at step j:
/// KL_j * (eps_j / sigma_bar_j) . grad mu_S, averaged over the batch.
inline ParamGradient score_function_term(const VelocityField& student, const VelocityField& teacher,
                                         const TrajectoryBatch& traj, const Schedule& sched, std::size_t j) {
  if (sched.deterministic()) throw InvalidArgument("score_function_term needs a > 0");
  require(traj.has_noises(), "trajectory has no recorded noises");
  detail::check_trajectory(traj, sched);
  const double var = sched.step_variance(j);
  const double sd = std::sqrt(var);
  const int d = traj.dim();
  const int n = traj.batch_size();
  const Batch mu_s_val = detail::frozen_means(student, traj, sched, j);
  const Batch mu_t = detail::frozen_means(teacher, traj, sched, j);
  return grad_scalar_loss(student, [&](Tape& tape) {
    const auto mu_s = detail::student_means(tape, traj, sched, j);
    Var acc = tape.constant(0.0);
    for (int b = 0; b < n; ++b) {
      double kl = 0.0;
      for (int i = 0; i < d; ++i) {
        const std::size_t k = static_cast<std::size_t>(b) * d + i;
        kl += (mu_s_val.data[k] - mu_t.data[k]) * (mu_s_val.data[k] - mu_t.data[k]);
      }
      kl /= 2.0 * var;
      for (int i = 0; i < d; ++i) {
        const std::size_t k = static_cast<std::size_t>(b) * d + i;
        acc = acc + mu_s[k] * (kl * traj.noises[j].data[k] / sd / n);
      }
    }
    return acc;
  }, "score-function term");
}

}  // namespace opd
