#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opd/autodiff.hpp"
#include "opd/error.hpp"
#include "opd/net.hpp"
#include "opd/objectives.hpp"
#include "opd/optim.hpp"
#include "opd/pretrain.hpp"
#include "opd/rl_teacher.hpp"
#include "opd/rng.hpp"
#include "opd/sampler.hpp"
#include "opd/schedule.hpp"
#include "opd/tasks.hpp"

namespace opd {

enum class LossMode { kClosedFormKl, kPpoSurrogate, kOdeL2 };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::kClosedFormKl: return "closed_form_kl";
    case LossMode::kPpoSurrogate: return "ppo_surrogate";
    case LossMode::kOdeL2: return "ode_l2";
  }
  return "?";
}

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "closed_form_kl") return LossMode::kClosedFormKl;
  if (s == "ppo_surrogate") return LossMode::kPpoSurrogate;
  if (s == "ode_l2") return LossMode::kOdeL2;
  throw InvalidArgument("unknown loss mode '" + s + "'");
}

struct DistillConfig {
  int rounds = 400;
  int batch_per_task = 64;
  double noise_level = 0.0;
  LossMode loss_mode = LossMode::kOdeL2;
  int accumulation = 0;  // tasks per optimizer step; 0 means all M tasks
  bool shuffle_tasks = false;
  double clip_eps = 0.2;
  LossReduction reduction{};
  AdamConfig adam{.lr = 3e-4};
  int eval_every = 10;
  int eval_samples = 512;

  void validate() const {
    if (rounds < 0) throw InvalidArgument("rounds must be >= 0");
    if (batch_per_task < 1) throw InvalidArgument("batch_per_task must be >= 1");
    if (noise_level < 0.0) throw InvalidArgument("noise_level must be >= 0");
    const bool ode = loss_mode == LossMode::kOdeL2;
    if (ode && noise_level != 0.0) throw InvalidArgument("loss mode ode_l2 requires noise_level = 0");
    if (!ode && noise_level == 0.0)
      throw InvalidArgument("loss mode " + to_string(loss_mode) + " requires noise_level > 0");
    if (accumulation < 0) throw InvalidArgument("accumulation must be >= 0");
  }
};

/// One (task, frozen teacher) pair of the distillation set.
struct TeacherBinding {
  const Task* task;
  const VelocityField* teacher;
};

struct RoundStats {
  int round = 0;
  std::vector<int> task_order;
  std::vector<double> task_loss;                     // indexed by position in the task list
  std::vector<std::uint64_t> rollout_param_hashes;   // parameters used for each task's rollout
  std::optional<std::vector<double>> eval_rewards;   // indexed by position in the task list
  long forward_evals = 0;                            // cumulative student evaluations
  double grad_norm = 0.0;                            // norm of the accumulated round gradient
  double update_norm = 0.0;
  double wallclock_s = 0.0;
  std::string stage;                                 // used by multi-stage trainers
};

struct TrainResult {
  VelocityField field;
  std::vector<RoundStats> history;
  long forward_evals = 0;
  long teacher_evals = 0;
};

struct TrainCallbacks {
  std::function<void(const RoundStats&)> on_round;
};

namespace detail {

inline std::vector<double> eval_tasks(const VelocityField& f, std::span<const Task* const> tasks,
                                      const Schedule& sched_eval, int n, const Rng& eval_root) {
  std::vector<double> r;
  for (const Task* t : tasks) {
    Rng er = eval_root.substream("task", static_cast<std::uint64_t>(t->id));
    r.push_back(evaluate(f, *t, sched_eval, n, er).mean_reward);
  }
  return r;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Loss of one task's on-policy batch under the configured mode.
inline ParamGradient distill_task_gradient(const VelocityField& student, const VelocityField& teacher,
                                           const TrajectoryBatch& traj, const Schedule& sched,
                                           const DistillConfig& cfg) {
  return grad_scalar_loss(student, [&](Tape& tape) {
    switch (cfg.loss_mode) {
      case LossMode::kClosedFormKl: return opd_sde_loss(tape, teacher, traj, sched, cfg.reduction);
      case LossMode::kOdeL2: return opd_ode_loss(tape, teacher, traj, sched, cfg.reduction);
      case LossMode::kPpoSurrogate:
        // rollouts come from the current parameters, so the snapshot is the student itself
        return ppo_surrogate_loss(tape, student, teacher, traj, sched, cfg.clip_eps, cfg.reduction);
    }
    throw InvalidArgument("unknown loss mode");
  }, "distillation loss (" + to_string(cfg.loss_mode) + ")");
}

/// Multi-task on-policy distillation. Each round visits every task: roll out
/// the current student without gradient, re-evaluate the student means at
/// the recorded states, accumulate the task-averaged gradient, then step.
inline TrainResult distill(VelocityField student_init, std::span<const TeacherBinding> bindings,
                           const DistillConfig& cfg, const Schedule& sched_train, const Schedule& sched_eval, Rng rng,
                           const TrainCallbacks& cb = {}) {
  cfg.validate();
  require(!bindings.empty(), "distill needs at least one (task, teacher) pair");
  for (const auto& b : bindings)
    if (!b.task || !b.teacher) throw MissingPrerequisite("missing teacher for a distillation task");
  const Schedule sched = sched_train.with_noise_level(cfg.noise_level);
  const int n_tasks = static_cast<int>(bindings.size());
  const int accum = cfg.accumulation == 0 ? n_tasks : cfg.accumulation;

  std::vector<const Task*> task_ptrs;
  for (const auto& b : bindings) task_ptrs.push_back(b.task);
  std::vector<Rng> task_rngs;
  for (const auto& b : bindings) task_rngs.push_back(rng.substream("task", static_cast<std::uint64_t>(b.task->id)));
  Rng order_rng = rng.substream("order");
  const Rng eval_root = rng.substream("eval");

  TrainResult out{std::move(student_init), {}, 0, 0};
  Adam opt(out.field.n_params(), cfg.adam);
  const auto start = std::chrono::steady_clock::now();

  std::vector<int> order(n_tasks);
  for (int r = 0; r < cfg.rounds; ++r) {
    RoundStats st;
    st.round = r;
    st.task_loss.assign(n_tasks, 0.0);
    for (int m = 0; m < n_tasks; ++m) order[m] = m;
    if (cfg.shuffle_tasks) std::shuffle(order.begin(), order.end(), order_rng.engine());
    st.task_order = order;

    std::vector<double> grad(out.field.n_params(), 0.0);
    std::vector<double> round_grad(out.field.n_params(), 0.0);
    int pending = 0;
    auto flush = [&] {
      if (pending == 0) return;
      for (double& g : grad) g /= static_cast<double>(pending);
      for (std::size_t k = 0; k < grad.size(); ++k) round_grad[k] += grad[k];
      st.update_norm += opt.step(out.field.params(), grad);
      if (!all_finite(out.field.params()))
        throw TrainingDiverged("non-finite parameters after distillation step", out.field);
      std::fill(grad.begin(), grad.end(), 0.0);
      pending = 0;
    };

    for (int m : order) {
      const auto& b = bindings[m];
      st.rollout_param_hashes.push_back(params_hash(out.field));
      ParamGradient g;
      try {
        const auto traj = rollout_batch(out.field, sched, b.task->id, cfg.batch_per_task, task_rngs[m], true,
                                        &out.forward_evals);
        g = distill_task_gradient(out.field, *b.teacher, traj, sched, cfg);
      } catch (const NumericError& e) {
        throw TrainingDiverged(e.what(), out.field);
      }
      out.forward_evals += g.evaluated_points;
      out.teacher_evals += static_cast<long>(cfg.batch_per_task) * static_cast<long>(sched.n_steps());
      st.task_loss[m] = g.loss;
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g.grad[k];
      if (++pending == accum) flush();
    }
    flush();
    st.grad_norm = l2_norm(round_grad);
    st.forward_evals = out.forward_evals;
    if (cfg.eval_every > 0 && ((r + 1) % cfg.eval_every == 0 || r + 1 == cfg.rounds))
      st.eval_rewards = detail::eval_tasks(out.field, task_ptrs, sched_eval, cfg.eval_samples, eval_root);
    st.wallclock_s = detail::seconds_since(start);
    if (cb.on_round) cb.on_round(st);
    out.history.push_back(std::move(st));
  }
  return out;
}

namespace detail {

inline RoundStats from_rl(const RlIterStats& s, int round_offset, const std::string& stage, std::size_t n_tasks,
                          std::span<const Task> stage_tasks, std::span<const Task> all_tasks) {
  RoundStats r;
  r.round = s.iter + round_offset;
  r.stage = stage;
  r.task_loss.assign(n_tasks, 0.0);
  for (const auto& ts : s.tasks)
    for (std::size_t m = 0; m < all_tasks.size(); ++m)
      if (all_tasks[m].id == ts.task) r.task_loss[m] = ts.loss;
  for (const auto& t : stage_tasks) r.task_order.push_back(t.id);
  r.forward_evals = s.forward_evals;
  r.grad_norm = s.grad_norm;
  r.update_norm = s.update_norm;
  r.wallclock_s = s.wallclock_s;
  return r;
}

}  // namespace detail

/// Multi-task RL baseline: every round visits all tasks with the teacher's
/// policy-gradient update and takes one step on the task-averaged gradient.
inline TrainResult train_joint_rl(VelocityField student_init, std::span<const Task> tasks, const RlConfig& rl_cfg,
                                  const Schedule& sched_train, const Schedule& sched_eval, Rng rng,
                                  const TrainCallbacks& cb = {}) {
  TrainResult out{VelocityField{}, {}, 0, 0};
  RlCallbacks rcb;
  rcb.on_iter = [&](const RlIterStats& s, const VelocityField&) {
    auto r = detail::from_rl(s, 0, "joint", tasks.size(), tasks, tasks);
    if (s.eval_rewards) r.eval_rewards = s.eval_rewards;
    if (cb.on_round) cb.on_round(r);
    out.history.push_back(std::move(r));
  };
  auto res = run_rl(std::move(student_init), tasks, rl_cfg, sched_train, sched_eval, std::move(rng), rcb);
  out.field = std::move(res.field);
  out.forward_evals = res.forward_evals;
  return out;
}

struct CascadeResult {
  TrainResult train;
  /// stage_rewards[s][m]: ODE reward of task m after stage s.
  std::vector<std::vector<double>> stage_rewards;
};

/// Sequential RL: full budget on task 1, then task 2 from the result, and so
/// on. Records every task's reward at each stage boundary.
inline CascadeResult train_cascade_rl(VelocityField student_init, std::span<const Task> ordered_tasks,
                                      const RlConfig& rl_cfg, const Schedule& sched_train, const Schedule& sched_eval,
                                      Rng rng, const TrainCallbacks& cb = {}) {
  CascadeResult out{{std::move(student_init), {}, 0, 0}, {}};
  std::vector<const Task*> ptrs;
  for (const auto& t : ordered_tasks) ptrs.push_back(&t);
  const Rng eval_root = rng.substream("eval");
  for (std::size_t s = 0; s < ordered_tasks.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s) + ":" + ordered_tasks[s].name;
    const int offset = static_cast<int>(s) * rl_cfg.iterations;
    const long evals_before = out.train.forward_evals;
    RlCallbacks rcb;
    rcb.on_iter = [&](const RlIterStats& it, const VelocityField& field) {
      auto r = detail::from_rl(it, offset, stage, ordered_tasks.size(), ordered_tasks.subspan(s, 1), ordered_tasks);
      r.forward_evals += evals_before;
      if (rl_cfg.eval_every > 0 && ((it.iter + 1) % rl_cfg.eval_every == 0 || it.iter + 1 == rl_cfg.iterations)) {
        // stage-local evaluation only covers the active task; report all of them
        r.eval_rewards = detail::eval_tasks(field, ptrs, sched_eval, rl_cfg.eval_samples, eval_root);
      }
      if (cb.on_round) cb.on_round(r);
      out.train.history.push_back(std::move(r));
    };
    RlConfig stage_cfg = rl_cfg;
    stage_cfg.eval_every = 0;
    auto res = run_rl(out.train.field, ordered_tasks.subspan(s, 1), stage_cfg, sched_train, sched_eval,
                      rng.substream("stage", s), rcb);
    out.train.field = std::move(res.field);
    out.train.forward_evals += res.forward_evals;
    out.stage_rewards.push_back(detail::eval_tasks(out.train.field, ptrs, sched_eval, rl_cfg.eval_samples, eval_root));
  }
  return out;
}

struct SftConfig {
  int rounds = 400;
  int samples_per_task = 1280;  // per round; default matches a 64 x 10-step OPD round in student evaluations
  AdamConfig adam{.lr = 3e-4};
  int eval_every = 10;
  int eval_samples = 512;
};

/// Off-policy baseline: teachers generate ODE samples every round and the
/// student regresses onto them with the flow-matching loss.
inline TrainResult train_sft_distill(VelocityField student_init, std::span<const TeacherBinding> bindings,
                                     const SftConfig& cfg, const Schedule& sched_train, const Schedule& sched_eval,
                                     Rng rng, const TrainCallbacks& cb = {}) {
  require(!bindings.empty(), "SFT distillation needs at least one (task, teacher) pair");
  require(cfg.samples_per_task >= 1, "samples_per_task must be >= 1");
  const Schedule sched = sched_train.with_noise_level(0.0);
  const int n_tasks = static_cast<int>(bindings.size());
  std::vector<const Task*> task_ptrs;
  for (const auto& b : bindings) task_ptrs.push_back(b.task);
  std::vector<Rng> task_rngs;
  for (const auto& b : bindings) task_rngs.push_back(rng.substream("task", static_cast<std::uint64_t>(b.task->id)));
  const Rng eval_root = rng.substream("eval");
  TrainResult out{std::move(student_init), {}, 0, 0};
  Adam opt(out.field.n_params(), cfg.adam);
  const auto start = std::chrono::steady_clock::now();
  const int d = out.field.dim();

  for (int r = 0; r < cfg.rounds; ++r) {
    RoundStats st;
    st.round = r;
    st.task_loss.assign(n_tasks, 0.0);
    std::vector<double> grad(out.field.n_params(), 0.0);
    for (int m = 0; m < n_tasks; ++m) {
      const auto& b = bindings[m];
      st.task_order.push_back(m);
      Rng& tr = task_rngs[m];
      const auto samples = rollout_batch(*b.teacher, sched, b.task->id, cfg.samples_per_task, tr, false,
                                         &out.teacher_evals);
      const int n = cfg.samples_per_task;
      FlowMatchingBatch fm{Batch(d, n), Batch(d, n), std::vector<double>(n), std::vector<int>(n, b.task->id)};
      for (int k = 0; k < n; ++k) {
        const double t = tr.uniform();
        fm.t[k] = t;
        for (int i = 0; i < d; ++i) {
          const double x0 = samples.terminal()(i, k);
          const double x1 = tr.normal();
          fm.xt(i, k) = (1.0 - t) * x0 + t * x1;
          fm.target(i, k) = x1 - x0;
        }
      }
      ParamGradient g;
      try {
        g = grad_scalar_loss(out.field, [&](Tape& tape) { return flow_matching_loss(tape, fm); }, "SFT loss");
      } catch (const NumericError& e) {
        throw TrainingDiverged(e.what(), out.field);
      }
      out.forward_evals += g.evaluated_points;
      st.task_loss[m] = g.loss;
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g.grad[k] / n_tasks;
    }
    st.grad_norm = l2_norm(grad);
    st.update_norm = opt.step(out.field.params(), grad);
    st.forward_evals = out.forward_evals;
    if (cfg.eval_every > 0 && ((r + 1) % cfg.eval_every == 0 || r + 1 == cfg.rounds))
      st.eval_rewards = detail::eval_tasks(out.field, task_ptrs, sched_eval, cfg.eval_samples, eval_root);
    st.wallclock_s = detail::seconds_since(start);
    if (cb.on_round) cb.on_round(st);
    out.history.push_back(std::move(st));
  }
  return out;
}

}  // namespace opd
