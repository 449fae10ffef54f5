#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "opd/autodiff.hpp"
#include "opd/net.hpp"
#include "opd/optim.hpp"
#include "opd/rng.hpp"
#include "opd/tasks.hpp"

namespace opd {

struct PretrainConfig {
  int steps = 3000;
  int batch = 256;
  AdamConfig adam{.lr = 2e-3};
  bool cosine_decay = true;
};

struct PretrainResult {
  VelocityField field;
  std::vector<double> losses;
  long forward_evals = 0;
};

/// Conditional flow-matching minibatch: x_t = (1 - t) x0 + t x1 with
/// x0 from the task target, x1 ~ N(0, I), t ~ U(0, 1); target x1 - x0.
struct FlowMatchingBatch {
  Batch xt;
  Batch target;
  std::vector<double> t;
  std::vector<int> c;
};

inline FlowMatchingBatch flow_matching_batch(const std::vector<const Task*>& tasks, int n, Rng& rng) {
  const int d = tasks.front()->target.dim;
  FlowMatchingBatch fm{Batch(d, n), Batch(d, n), std::vector<double>(n), std::vector<int>(n)};
  for (int b = 0; b < n; ++b) {
    const Task& task = *tasks[rng.below(tasks.size())];
    Batch x0 = sample_target(task, 1, rng);
    const double t = rng.uniform();
    fm.t[b] = t;
    fm.c[b] = task.id;
    for (int i = 0; i < d; ++i) {
      const double x1 = rng.normal();
      fm.xt(i, b) = (1.0 - t) * x0(i, 0) + t * x1;
      fm.target(i, b) = x1 - x0(i, 0);
    }
  }
  return fm;
}

/// Mean over the batch of |v(x_t, t, c) - target|^2.
inline Var flow_matching_loss(Tape& tape, const FlowMatchingBatch& fm) {
  const NetOutput v = tape.call(fm.xt, fm.t, fm.c);
  Var acc = tape.constant(0.0);
  for (int b = 0; b < fm.xt.cols; ++b)
    for (int i = 0; i < fm.xt.rows; ++i) acc = acc + square(v(i, b) - fm.target(i, b));
  return acc * (1.0 / fm.xt.cols);
}

inline double cosine_scale(long step, long total) {
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

/// Trains a reference velocity field by conditional flow matching on the
/// union of task targets.
inline PretrainResult pretrain(VelocityField init, const std::vector<Task>& tasks, const PretrainConfig& cfg,
                               Rng rng, const std::function<void(int, double)>& on_step = {}) {
  require(!tasks.empty(), "pretraining needs at least one task");
  std::vector<const Task*> ptrs;
  for (const auto& t : tasks) ptrs.push_back(&t);
  PretrainResult out{std::move(init), {}, 0};
  Adam opt(out.field.n_params(), cfg.adam);
  for (int s = 0; s < cfg.steps; ++s) {
    const auto fm = flow_matching_batch(ptrs, cfg.batch, rng);
    auto g = grad_scalar_loss(out.field, [&](Tape& tape) { return flow_matching_loss(tape, fm); },
                              "flow-matching loss at step " + std::to_string(s));
    out.forward_evals += g.evaluated_points;
    out.losses.push_back(g.loss);
    if (on_step) on_step(s, g.loss);
    opt.step(out.field.params(), g.grad, cfg.cosine_decay ? cosine_scale(s, cfg.steps) : 1.0);
  }
  return out;
}

}  // namespace opd
