#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opd/autodiff.hpp"
#include "opd/error.hpp"
#include "opd/net.hpp"
#include "opd/objectives.hpp"
#include "opd/optim.hpp"
#include "opd/rng.hpp"
#include "opd/sampler.hpp"
#include "opd/schedule.hpp"
#include "opd/tasks.hpp"

namespace opd {

struct RlConfig {
  int group_size = 16;
  int groups = 8;          // rollouts per iteration = group_size * groups
  int iterations = 300;
  double clip_eps = 0.2;
  double noise_level = 0.7;
  double kl_weight = 0.0;  // optional reverse-KL penalty towards the initial model
  AdamConfig adam{.lr = 3e-4, .max_grad_norm = 0.0};
  int eval_every = 10;
  int eval_samples = 512;

  void validate() const {
    if (group_size < 2) throw InvalidArgument("RL group_size must be >= 2");
    if (groups < 1) throw InvalidArgument("RL groups must be >= 1");
    if (!(noise_level > 0.0)) throw InvalidArgument("RL needs a stochastic policy: noise_level > 0");
    if (!(clip_eps > 0.0)) throw InvalidArgument("clip_eps must be > 0");
    if (iterations < 0) throw InvalidArgument("iterations must be >= 0");
  }
};

/// Thrown when training produces a non-finite loss or gradient; carries the
/// last parameters that were still finite.
struct TrainingDiverged : NumericError {
  TrainingDiverged(const std::string& what, VelocityField last) : NumericError(what), last_finite(std::move(last)) {}
  VelocityField last_finite;
};

/// (r_i - mean) / max(std, 1e-6) with the population standard deviation.
inline std::vector<double> group_advantage(std::span<const double> rewards) {
  if (rewards.size() < 2) throw InvalidArgument("group_advantage needs at least two rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::max(std::sqrt(var / n), 1e-6);
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

/// Clipped surrogate with one advantage per trajectory, broadcast to every
/// step: -mean_b sum_j min(rho A_b, clip(rho) A_b).
inline Var policy_gradient_loss(Tape& tape, const VelocityField& snapshot, const TrajectoryBatch& traj,
                                const Schedule& sched, std::span<const double> advantages, double clip_eps,
                                std::vector<double>* ratios = nullptr) {
  require(static_cast<int>(advantages.size()) == traj.batch_size(), "one advantage per trajectory");
  require(!sched.deterministic(), "policy gradient needs a > 0");
  const int d = traj.dim();
  const int n = traj.batch_size();
  Var total = tape.constant(0.0);
  if (ratios) ratios->clear();
  for (std::size_t j = 0; j < sched.n_steps(); ++j) {
    const double var = sched.step_variance(j);
    const auto mu_s = detail::student_means(tape, traj, sched, j);
    const Batch mu_old = detail::frozen_means(snapshot, traj, sched, j);
    const Batch& action = traj.states[j + 1];
    for (int b = 0; b < n; ++b) {
      Var resid = tape.constant(0.0);
      double resid_old = 0.0;
      for (int i = 0; i < d; ++i) {
        const std::size_t k = static_cast<std::size_t>(b) * d + i;
        resid = resid + square(action.data[k] - mu_s[k]);
        resid_old += (action.data[k] - mu_old.data[k]) * (action.data[k] - mu_old.data[k]);
      }
      // log-normalizers cancel in the ratio
      const Var ratio = exp((resid_old - resid) / (2.0 * var));
      if (ratios) ratios->push_back(ratio.value());
      const double a = advantages[b];
      const Var term = min(ratio * a, clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a);
      total = total - term * (1.0 / n);
    }
  }
  return total;
}

struct RlTaskStats {
  int task = 0;
  double mean_reward = 0.0;   // of the SDE training rollouts
  double loss = 0.0;
};

struct RlIterStats {
  int iter = 0;
  std::vector<RlTaskStats> tasks;
  std::optional<std::vector<double>> eval_rewards;  // ODE evaluation, one per task
  long forward_evals = 0;                            // cumulative student evaluations
  double update_norm = 0.0;
  double grad_norm = 0.0;
  double wallclock_s = 0.0;
};

struct RlResult {
  VelocityField field;
  std::vector<RlIterStats> history;
  long forward_evals = 0;
};

/// Rollouts, rewards and the differentiated surrogate for one task.
inline ParamGradient rl_task_gradient(const VelocityField& field, const VelocityField* reference, const Task& task,
                                      const RlConfig& cfg, const Schedule& sched, Rng& rng, RlTaskStats& stats,
                                      long& forward_evals) {
  const int n = cfg.group_size * cfg.groups;
  const auto traj = rollout_batch(field, sched, task.id, n, rng, true, &forward_evals);
  std::vector<double> rewards(n), adv(n);
  for (int b = 0; b < n; ++b)
    rewards[b] = task.reward(std::span<const double>(traj.terminal().col(b), traj.dim()));
  for (int g = 0; g < cfg.groups; ++g) {
    const auto a = group_advantage(std::span<const double>(rewards).subspan(g * cfg.group_size, cfg.group_size));
    std::copy(a.begin(), a.end(), adv.begin() + g * cfg.group_size);
  }
  stats.task = task.id;
  stats.mean_reward = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  auto g = grad_scalar_loss(field, [&](Tape& tape) {
    Var loss = policy_gradient_loss(tape, field, traj, sched, adv, cfg.clip_eps);
    if (cfg.kl_weight > 0.0 && reference) loss = loss + opd_sde_loss(tape, *reference, traj, sched) * cfg.kl_weight;
    return loss;
  }, "policy-gradient loss for task " + std::to_string(task.id));
  forward_evals += g.evaluated_points;
  stats.loss = g.loss;
  return g;
}

struct RlCallbacks {
  /// Called after every update with the iteration stats and the updated field.
  std::function<void(const RlIterStats&, const VelocityField&)> on_iter;
};

/// Round-robin RL over tasks: each iteration visits every task once, averages
/// the task gradients and takes one optimizer step. With one task this is
/// single-task teacher training.
inline RlResult run_rl(VelocityField init, std::span<const Task> tasks, const RlConfig& cfg, const Schedule& sched_train,
                       const Schedule& sched_eval, Rng rng, const RlCallbacks& cb = {}) {
  cfg.validate();
  require(!tasks.empty(), "RL needs at least one task");
  const Schedule sched = sched_train.with_noise_level(cfg.noise_level);
  const VelocityField reference = init;
  RlResult out{std::move(init), {}, 0};
  Adam opt(out.field.n_params(), cfg.adam);
  const auto start = std::chrono::steady_clock::now();
  const Rng eval_root = rng.substream("eval");
  std::vector<Rng> task_rngs;
  for (const auto& t : tasks) task_rngs.push_back(rng.substream("task", static_cast<std::uint64_t>(t.id)));

  auto eval_all = [&](const VelocityField& f) {
    std::vector<double> r;
    for (const auto& t : tasks) {
      Rng er = eval_root.substream("task", static_cast<std::uint64_t>(t.id));
      r.push_back(evaluate(f, t, sched_eval, cfg.eval_samples, er).mean_reward);
    }
    return r;
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    RlIterStats st;
    st.iter = it;
    std::vector<double> grad(out.field.n_params(), 0.0);
    for (std::size_t m = 0; m < tasks.size(); ++m) {
      RlTaskStats ts;
      ParamGradient g;
      try {
        g = rl_task_gradient(out.field, &reference, tasks[m], cfg, sched, task_rngs[m], ts, out.forward_evals);
      } catch (const NumericError& e) {
        throw TrainingDiverged(e.what(), out.field);
      }
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g.grad[k] / static_cast<double>(tasks.size());
      st.tasks.push_back(ts);
    }
    st.grad_norm = l2_norm(grad);
    st.update_norm = opt.step(out.field.params(), grad);
    if (!all_finite(out.field.params())) throw TrainingDiverged("non-finite parameters after RL update", out.field);
    st.forward_evals = out.forward_evals;
    if (cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations))
      st.eval_rewards = eval_all(out.field);
    st.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (cb.on_iter) cb.on_iter(st, out.field);
    out.history.push_back(std::move(st));
  }
  return out;
}

/// Stage-1 teacher: RL on a single task starting from the pretrained model.
inline RlResult train_teacher(VelocityField base, const Task& task, const RlConfig& cfg, const Schedule& sched_train,
                              const Schedule& sched_eval, Rng rng, const RlCallbacks& cb = {}) {
  return run_rl(std::move(base), std::span<const Task>(&task, 1), cfg, sched_train, sched_eval, std::move(rng), cb);
}

}  // namespace opd
