#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "opd/error.hpp"
#include "opd/net.hpp"
#include "opd/rng.hpp"
#include "opd/sampler.hpp"
#include "opd/schedule.hpp"

namespace opd {

/// Equal-weight isotropic Gaussian mixture. Centers live in the first two
/// coordinates; remaining coordinates are centered at zero.
struct Mixture {
  int dim = 2;
  std::vector<std::vector<double>> centers;
  double stddev = 0.15;

  std::vector<double> mean() const {
    std::vector<double> m(dim, 0.0);
    for (const auto& c : centers)
      for (int i = 0; i < dim; ++i) m[i] += c[i] / static_cast<double>(centers.size());
    return m;
  }
};

/// K modes evenly spaced on a circle of the given radius, rotated by phase.
inline Mixture ring_mixture(int dim, int n_modes, double radius, double stddev, double phase) {
  require(dim >= 2, "ring mixtures need dim >= 2");
  require(n_modes >= 1, "need at least one mode");
  Mixture m;
  m.dim = dim;
  m.stddev = stddev;
  for (int k = 0; k < n_modes; ++k) {
    const double ang = phase + 2.0 * std::numbers::pi * k / n_modes;
    std::vector<double> c(dim, 0.0);
    c[0] = radius * std::cos(ang);
    c[1] = radius * std::sin(ang);
    m.centers.push_back(std::move(c));
  }
  return m;
}

enum class RewardKind { kUpper, kRing, kEast };

/// Smooth reward bounded in [0, 1].
struct Reward {
  RewardKind kind = RewardKind::kUpper;
  double width = 0.1;
  double radius = 2.0;                          // ring
  std::vector<std::vector<double>> targets;     // east

  double operator()(std::span<const double> x) const {
    switch (kind) {
      case RewardKind::kUpper: {
        // logistic in x_2 / width, written to stay finite for any input
        const double z = x[1] / width;
        return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      }
      case RewardKind::kRing: {
        double r2 = 0.0;
        for (double v : x) r2 += v * v;
        const double dev = std::sqrt(r2) - radius;
        return std::exp(-dev * dev / (2.0 * width * width));
      }
      case RewardKind::kEast: {
        // exp(-softmin(d^2) / 2w^2) with log-sum-exp softmin, capped at 1
        double acc = 0.0;
        for (const auto& m : targets) {
          double d2 = 0.0;
          for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - m[i]) * (x[i] - m[i]);
          acc += std::exp(-d2 / (2.0 * width * width));
        }
        return std::min(1.0, acc);
      }
    }
    return 0.0;
  }
};

struct Task {
  int id = 0;
  std::string name;
  std::string description;
  Mixture target;
  Reward reward;
};

struct TaskSuiteSpec {
  int dim = 2;
  int n_modes = 8;
  double radius = 2.0;
  double mode_std = 0.15;
  double phase = std::numbers::pi / 8.0;
  std::vector<std::string> rewards{"upper", "ring", "east"};
  double upper_width = 0.1;
  double ring_width = 0.2;
  double east_width = 0.3;
  int east_modes = 2;
};

inline Task make_task(int id, const std::string& reward, const Mixture& base, const TaskSuiteSpec& s) {
  Task t;
  t.id = id;
  t.name = reward;
  t.target = base;
  if (reward == "upper") {
    t.reward.kind = RewardKind::kUpper;
    t.reward.width = s.upper_width;
    t.description = "samples in the upper half-plane (x2 > 0)";
  } else if (reward == "ring") {
    t.reward.kind = RewardKind::kRing;
    t.reward.width = s.ring_width;
    t.reward.radius = s.radius;
    t.description = "samples on the ring |x| = radius";
  } else if (reward == "east") {
    t.reward.kind = RewardKind::kEast;
    t.reward.width = s.east_width;
    auto centers = base.centers;
    std::stable_sort(centers.begin(), centers.end(),
                     [](const auto& a, const auto& b) { return a[0] > b[0]; });
    require(s.east_modes >= 1 && s.east_modes <= static_cast<int>(centers.size()), "bad east_modes");
    centers.resize(s.east_modes);
    t.reward.targets = centers;
    t.description = "samples near the modes with the largest x1";
  } else {
    throw InvalidArgument("unknown reward '" + reward + "'");
  }
  return t;
}

inline std::vector<Task> make_task_suite(const TaskSuiteSpec& s) {
  const Mixture base = ring_mixture(s.dim, s.n_modes, s.radius, s.mode_std, s.phase);
  std::vector<Task> out;
  for (std::size_t k = 0; k < s.rewards.size(); ++k) out.push_back(make_task(static_cast<int>(k), s.rewards[k], base, s));
  return out;
}

/// Three conflicting tasks on the shared 8-mode ring: upper, ring, east.
inline std::vector<Task> builtin_task_suite() { return make_task_suite(TaskSuiteSpec{}); }

/// n i.i.d. draws from the task's mixture, returned as a dim x n batch.
inline Batch sample_target(const Task& task, int n, Rng& rng) {
  require(n >= 1, "sample_target needs n >= 1");
  const Mixture& m = task.target;
  Batch out(m.dim, n);
  for (int b = 0; b < n; ++b) {
    const auto& c = m.centers[rng.below(m.centers.size())];
    for (int i = 0; i < m.dim; ++i) out(i, b) = c[i] + m.stddev * rng.normal();
  }
  return out;
}

struct EvalReport {
  int task = 0;
  double mean_reward = 0.0;
  double coverage = 0.0;        // fraction of mixture modes hit by at least one sample
  double near_mode = 0.0;       // fraction of samples within mode_radius of some mode
  int n = 0;
};

inline double mean_reward(const Task& task, const Batch& x) {
  double acc = 0.0;
  for (int b = 0; b < x.cols; ++b) acc += task.reward(std::span<const double>(x.col(b), x.rows));
  return acc / x.cols;
}

inline EvalReport score_samples(const Task& task, const Batch& x, double mode_radius = 0.5) {
  EvalReport r;
  r.task = task.id;
  r.n = x.cols;
  r.mean_reward = mean_reward(task, x);
  const auto& centers = task.target.centers;
  std::vector<bool> hit(centers.size(), false);
  int near = 0;
  for (int b = 0; b < x.cols; ++b) {
    bool any = false;
    for (std::size_t m = 0; m < centers.size(); ++m) {
      double d2 = 0.0;
      for (int i = 0; i < x.rows; ++i) d2 += (x(i, b) - centers[m][i]) * (x(i, b) - centers[m][i]);
      if (d2 <= mode_radius * mode_radius) {
        hit[m] = true;
        any = true;
      }
    }
    near += any;
  }
  r.near_mode = static_cast<double>(near) / x.cols;
  r.coverage = static_cast<double>(std::count(hit.begin(), hit.end(), true)) / centers.size();
  return r;
}

/// Deterministic evaluation with n ODE rollouts conditioned on task.id.
inline EvalReport evaluate(const VelocityField& vf, const Task& task, const Schedule& sched_eval, int n, Rng& rng) {
  require(sched_eval.deterministic(), "evaluation uses the ODE sampler (a = 0)");
  const auto traj = rollout_batch(vf, sched_eval, task.id, n, rng, false);
  return score_samples(task, traj.terminal());
}

}  // namespace opd
