#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "opd/autodiff.hpp"
#include "opd/objectives.hpp"
#include "opd/opd_trainer.hpp"
#include "opd/rng.hpp"
#include "opd/sampler.hpp"
#include "opd/schedule.hpp"

namespace opd {

/// Sample statistics of one gradient estimator at a fixed state.
struct GradientReport {
  std::string estimator;
  std::vector<double> mean;
  std::vector<double> variance;   // per coordinate, unbiased
  long n_samples = 0;
  std::uint64_t seed = 0;
  double total_variance = 0.0;    // sum of per-coordinate variances
  double max_abs_bias = 0.0;      // vs the pathwise reference
  double max_z = 0.0;             // max |mean - reference| / stderr over coordinates with stderr > 0

  double stderr_of(std::size_t k) const { return std::sqrt(variance[k] / static_cast<double>(n_samples)); }
};

/// Welford accumulator over flat vectors.
class RunningMoments {
 public:
  explicit RunningMoments(std::size_t n) : mean_(n, 0.0), m2_(n, 0.0) {}
  void add(std::span<const double> x) {
    ++n_;
    const double inv = 1.0 / static_cast<double>(n_);
    for (std::size_t k = 0; k < mean_.size(); ++k) {
      const double delta = x[k] - mean_[k];
      mean_[k] += delta * inv;
      m2_[k] += delta * (x[k] - mean_[k]);
    }
  }
  long count() const { return n_; }
  const std::vector<double>& mean() const { return mean_; }
  std::vector<double> variance() const {
    std::vector<double> v(mean_.size(), 0.0);
    if (n_ > 1)
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = m2_[k] / static_cast<double>(n_ - 1);
    return v;
  }

 private:
  long n_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

inline void compare_to_reference(GradientReport& r, std::span<const double> reference) {
  r.max_abs_bias = 0.0;
  r.max_z = 0.0;
  r.total_variance = 0.0;
  for (std::size_t k = 0; k < r.mean.size(); ++k) {
    r.total_variance += r.variance[k];
    const double bias = std::abs(r.mean[k] - reference[k]);
    r.max_abs_bias = std::max(r.max_abs_bias, bias);
    const double se = r.stderr_of(k);
    if (se > 0.0) r.max_z = std::max(r.max_z, bias / se);
    else if (bias > 0.0) r.max_z = std::numeric_limits<double>::infinity();
  }
}

struct EstimatorStudy {
  GradientReport pathwise;
  GradientReport ppo;
  GradientReport score_term;  // the score-function part alone; reference is zero
};

/// Conditional gradient estimators of the step-j KL at a fixed state x.
/// Pathwise: gradient of the closed-form KL, deterministic given x.
/// PPO: per-sample gradient of the clipped surrogate at rho = 1, actions
/// resampled from the student kernel.
inline EstimatorStudy estimator_study(const VelocityField& student, const VelocityField& teacher,
                                      std::span<const double> x, std::size_t j, const Schedule& sched, int c,
                                      long n_samples, Rng& rng, double clip_eps = 0.2) {
  if (sched.deterministic()) throw InvalidArgument("estimator_study needs a > 0");
  require(n_samples >= 2, "estimator_study needs at least two samples");
  const int d = student.dim();
  require(static_cast<int>(x.size()) == d, "state has wrong dimension");
  Batch xb(d, 1);
  std::copy(x.begin(), x.end(), xb.data.begin());
  const std::size_t n_params = student.n_params();
  EstimatorStudy out;

  const auto path = grad_scalar_loss(student, [&](Tape& tape) {
    return kl_step_terms(tape, teacher, xb, c, sched, j)[0];
  }, "pathwise KL");
  out.pathwise.estimator = "pathwise";
  out.pathwise.mean = path.grad;
  out.pathwise.variance.assign(n_params, 0.0);
  out.pathwise.n_samples = n_samples;
  out.pathwise.seed = rng.seed();
  compare_to_reference(out.pathwise, path.grad);

  const auto mu = transition_mean(student, x, j, sched, c);
  const auto mu_t = transition_mean(teacher, x, j, sched, c);
  const double kl = gaussian_kl_same_cov(mu, mu_t, sched.step_variance(j));
  const double sd = std::sqrt(sched.step_variance(j));
  // d mu_S / d theta, one row per output coordinate
  std::vector<std::vector<double>> jac;
  for (int i = 0; i < d; ++i) {
    jac.push_back(grad_scalar_loss(student, [&](Tape& tape) {
      TrajectoryBatch view;
      view.cond = c;
      view.states.assign(j + 1, Batch());
      view.states[j] = xb;
      return detail::student_means(tape, view, sched, j)[i];
    }).grad);
  }

  RunningMoments ppo(n_params), score(n_params);
  Batch action(d, 1);
  std::vector<double> eps(d), score_vec(n_params);
  for (long s = 0; s < n_samples; ++s) {
    for (int i = 0; i < d; ++i) {
      eps[i] = rng.normal();
      action(i, 0) = mu[i] + sd * eps[i];
    }
    const auto g = grad_scalar_loss(student, [&](Tape& tape) {
      return ppo_step_terms(tape, student, teacher, xb, action, c, sched, j, clip_eps)[0];
    }, "PPO surrogate");
    ppo.add(g.grad);
    std::fill(score_vec.begin(), score_vec.end(), 0.0);
    for (int i = 0; i < d; ++i)
      for (std::size_t k = 0; k < n_params; ++k) score_vec[k] += kl * eps[i] / sd * jac[i][k];
    score.add(score_vec);
  }
  out.ppo = {"ppo_surrogate", ppo.mean(), ppo.variance(), n_samples, rng.seed()};
  compare_to_reference(out.ppo, path.grad);
  out.score_term = {"score_function_term", score.mean(), score.variance(), n_samples, rng.seed()};
  compare_to_reference(out.score_term, std::vector<double>(n_params, 0.0));
  return out;
}

/// One curve of a sweep: average ODE reward against student evaluations.
struct SweepSeries {
  std::string label;
  double noise_level = 0.0;
  LossMode loss_mode = LossMode::kOdeL2;
  std::uint64_t seed = 0;
  std::vector<RoundStats> history;

  double final_average_reward() const {
    for (auto it = history.rbegin(); it != history.rend(); ++it)
      if (it->eval_rewards) {
        double s = 0.0;
        for (double r : *it->eval_rewards) s += r;
        return s / static_cast<double>(it->eval_rewards->size());
      }
    return std::numeric_limits<double>::quiet_NaN();
  }
};

/// Runs distillation once per noise level with a shared budget. a = 0 uses the
/// ode_l2 loss; a > 0 uses the closed-form KL.
inline std::vector<SweepSeries> noise_sweep(const VelocityField& student_init,
                                            std::span<const TeacherBinding> bindings,
                                            std::span<const double> a_values, const DistillConfig& base,
                                            const Schedule& sched_train, const Schedule& sched_eval, Rng rng,
                                            const TrainCallbacks& cb = {}) {
  require(std::find(a_values.begin(), a_values.end(), 0.0) != a_values.end(), "noise sweep must include a = 0");
  std::vector<SweepSeries> out;
  for (double a : a_values) {
    DistillConfig cfg = base;
    cfg.noise_level = a;
    cfg.loss_mode = a == 0.0 ? LossMode::kOdeL2 : LossMode::kClosedFormKl;
    SweepSeries s;
    s.label = "a=" + std::to_string(a);
    s.noise_level = a;
    s.loss_mode = cfg.loss_mode;
    s.seed = rng.seed();
    s.history = distill(student_init, bindings, cfg, sched_train, sched_eval, rng, cb).history;
    out.push_back(std::move(s));
  }
  return out;
}

/// closed_form_kl and ppo_surrogate at the same a > 0, same seed and budget.
inline std::vector<SweepSeries> loss_mode_sweep(const VelocityField& student_init,
                                                std::span<const TeacherBinding> bindings, double noise_level,
                                                const DistillConfig& base, const Schedule& sched_train,
                                                const Schedule& sched_eval, Rng rng, const TrainCallbacks& cb = {}) {
  require(noise_level > 0.0, "loss_mode_sweep needs a > 0");
  std::vector<SweepSeries> out;
  for (LossMode m : {LossMode::kClosedFormKl, LossMode::kPpoSurrogate}) {
    DistillConfig cfg = base;
    cfg.noise_level = noise_level;
    cfg.loss_mode = m;
    SweepSeries s;
    s.label = to_string(m);
    s.noise_level = noise_level;
    s.loss_mode = m;
    s.seed = rng.seed();
    s.history = distill(student_init, bindings, cfg, sched_train, sched_eval, rng, cb).history;
    out.push_back(std::move(s));
  }
  return out;
}

/// Across-seed variance of the per-round gradient norm, averaged over rounds.
struct UpdateNormStudy {
  LossMode mode;
  std::vector<std::vector<double>> grad_norms;    // [seed][round]
  std::vector<std::vector<double>> update_norms;  // [seed][round]
  double mean_grad_norm_variance = 0.0;
  double mean_update_norm_variance = 0.0;
};

inline double mean_across_seed_variance(const std::vector<std::vector<double>>& series) {
  if (series.size() < 2 || series.front().empty()) return 0.0;
  const std::size_t rounds = series.front().size();
  const double n = static_cast<double>(series.size());
  double acc = 0.0;
  for (std::size_t r = 0; r < rounds; ++r) {
    double m = 0.0;
    for (const auto& s : series) m += s[r];
    m /= n;
    double v = 0.0;
    for (const auto& s : series) v += (s[r] - m) * (s[r] - m);
    acc += v / (n - 1.0);
  }
  return acc / static_cast<double>(rounds);
}

inline UpdateNormStudy update_norm_study(const VelocityField& student_init, std::span<const TeacherBinding> bindings,
                                         LossMode mode, double noise_level, const DistillConfig& base,
                                         const Schedule& sched_train, const Schedule& sched_eval,
                                         std::span<const std::uint64_t> seeds) {
  UpdateNormStudy out{mode, {}, {}, 0.0, 0.0};
  DistillConfig cfg = base;
  cfg.loss_mode = mode;
  cfg.noise_level = noise_level;
  cfg.eval_every = 0;
  for (std::uint64_t seed : seeds) {
    const auto res = distill(student_init, bindings, cfg, sched_train, sched_eval, Rng(seed));
    std::vector<double> g, u;
    for (const auto& r : res.history) {
      g.push_back(r.grad_norm);
      u.push_back(r.update_norm);
    }
    out.grad_norms.push_back(std::move(g));
    out.update_norms.push_back(std::move(u));
  }
  out.mean_grad_norm_variance = mean_across_seed_variance(out.grad_norms);
  out.mean_update_norm_variance = mean_across_seed_variance(out.update_norms);
  return out;
}

/// Trailing moving average; window is clamped at the start.
inline std::vector<double> moving_average(std::span<const double> xs, std::size_t window) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    acc += xs[k];
    if (k >= window) acc -= xs[k - window];
    out.push_back(acc / static_cast<double>(std::min(k + 1, window)));
  }
  return out;
}

}  // namespace opd
