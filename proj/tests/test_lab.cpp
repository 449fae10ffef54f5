#include <catch_amalgamated.hpp>

#include <cmath>

#include "opd/lab.hpp"
#include "test_util.hpp"

using Catch::Approx;
using namespace opd;
using namespace opd::testing;

TEST_CASE("running moments match a two-pass computation", "[lab]") {
  Rng rng(1);
  std::vector<std::vector<double>> xs(50, std::vector<double>(3));
  for (auto& x : xs)
    for (double& v : x) v = 5.0 + rng.normal();
  RunningMoments m(3);
  for (const auto& x : xs) m.add(x);
  for (int k = 0; k < 3; ++k) {
    double mean = 0.0, var = 0.0;
    for (const auto& x : xs) mean += x[k] / 50.0;
    for (const auto& x : xs) var += (x[k] - mean) * (x[k] - mean) / 49.0;
    CHECK(m.mean()[k] == Approx(mean).epsilon(1e-13));
    CHECK(m.variance()[k] == Approx(var).epsilon(1e-12));
  }
}

TEST_CASE("moving average and across-seed variance", "[lab]") {
  const std::vector<double> xs{1, 2, 3, 4, 5};
  CHECK(moving_average(xs, 2) == std::vector<double>{1, 1.5, 2.5, 3.5, 4.5});
  CHECK(moving_average(xs, 10) == std::vector<double>{1, 1.5, 2, 2.5, 3});
  const std::vector<std::vector<double>> series{{1, 10}, {3, 10}, {5, 10}};
  // round 0: var(1,3,5) = 4; round 1: 0
  CHECK(mean_across_seed_variance(series) == Approx(2.0));
}

TEST_CASE("estimator study with teacher equal to student", "[lab]") {
  const auto vf = small_field(2);
  const auto s = make_uniform_schedule(5, 0.7, 0.9);
  const std::vector<double> x{0.3, -0.8};
  Rng rng(3);
  const auto st = estimator_study(vf, vf, x, 2, s, 1, 1000, rng);
  for (double v : st.pathwise.mean) CHECK(v == 0.0);
  for (double v : st.ppo.mean) CHECK(v == 0.0);
  CHECK(st.ppo.total_variance == 0.0);
}

TEST_CASE("PPO and pathwise estimators agree in expectation", "[lab]") {
  const auto student = small_field(4);
  const auto teacher = small_field(5);
  const auto s = make_uniform_schedule(6, 0.7, 0.9);
  const std::vector<double> x{-0.5, 1.1};
  Rng rng(6);
  const auto st = estimator_study(student, teacher, x, 3, s, 2, 20000, rng);
  INFO("ppo max z " << st.ppo.max_z << ", score max z " << st.score_term.max_z);
  CHECK(st.pathwise.total_variance == 0.0);
  CHECK(st.ppo.total_variance > 0.0);
  CHECK(st.score_term.total_variance > 0.0);
  CHECK(st.ppo.n_samples == 20000);
  for (std::size_t k = 0; k < st.ppo.mean.size(); ++k) {
    CHECK(std::abs(st.ppo.mean[k] - st.pathwise.mean[k]) <= 4.0 * st.ppo.stderr_of(k) + 1e-15);
    CHECK(std::abs(st.score_term.mean[k]) <= 4.0 * st.score_term.stderr_of(k) + 1e-15);
  }
  // the PPO per-sample gradient is pathwise plus score term, so their variances coincide
  CHECK(st.ppo.total_variance == Approx(st.score_term.total_variance).epsilon(1e-6));
  Rng bad(1);
  CHECK_THROWS_AS(estimator_study(student, teacher, x, 3, s.with_noise_level(0.0), 2, 100, bad), InvalidArgument);
}

TEST_CASE("sweeps", "[lab]") {
  const auto vf = small_field(7);
  const auto tasks = builtin_task_suite();
  std::vector<TeacherBinding> self;
  for (const auto& t : tasks) self.push_back({&t, &vf});
  DistillConfig base;
  base.rounds = 3;
  base.batch_per_task = 4;
  base.eval_every = 1;
  base.eval_samples = 16;
  const auto train = make_uniform_schedule(4, 0.0, 0.9);
  const auto eval = make_uniform_schedule(8, 0.0);

  SECTION("loss modes with a zero-distance teacher give flat zero curves") {
    const auto series = loss_mode_sweep(vf, self, 0.7, base, train, eval, Rng(8));
    REQUIRE(series.size() == 2);
    CHECK(series[0].loss_mode == LossMode::kClosedFormKl);
    CHECK(series[1].loss_mode == LossMode::kPpoSurrogate);
    for (const auto& s : series)
      for (const auto& r : s.history) {
        for (double l : r.task_loss) CHECK(l == 0.0);
        CHECK(r.update_norm == 0.0);
      }
  }
  SECTION("noise sweep couples a = 0 with the ODE loss") {
    const std::vector<double> as{0.0, 0.3};
    const auto series = noise_sweep(vf, self, as, base, train, eval, Rng(9));
    REQUIRE(series.size() == 2);
    CHECK(series[0].loss_mode == LossMode::kOdeL2);
    CHECK(series[1].loss_mode == LossMode::kClosedFormKl);
    CHECK(std::isfinite(series[0].final_average_reward()));
    const std::vector<double> no_zero{0.1};
    CHECK_THROWS_AS(noise_sweep(vf, self, no_zero, base, train, eval, Rng(9)), InvalidArgument);
  }
  SECTION("update-norm study is reproducible") {
    const auto teacher = small_field(10);
    std::vector<TeacherBinding> b;
    for (const auto& t : tasks) b.push_back({&t, &teacher});
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    const auto a = update_norm_study(vf, b, LossMode::kPpoSurrogate, 0.7, base, train, eval, seeds);
    const auto c = update_norm_study(vf, b, LossMode::kPpoSurrogate, 0.7, base, train, eval, seeds);
    CHECK(a.grad_norms == c.grad_norms);
    CHECK(a.grad_norms.size() == 3);
    CHECK(a.grad_norms[0].size() == 3);
    CHECK(a.mean_grad_norm_variance == Approx(mean_across_seed_variance(a.grad_norms)));
    CHECK(a.mean_grad_norm_variance > 0.0);
  }
}
