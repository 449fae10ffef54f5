#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "opd/config.hpp"
#include "opd/lab.hpp"
#include "opd/net.hpp"
#include "opd/opd_trainer.hpp"
#include "opd/pretrain.hpp"
#include "opd/rl_teacher.hpp"
#include "opd/tasks.hpp"

namespace opd {

inline constexpr const char* kVersion = "opd 0.1.0";

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"pretrain", "teachers", "distill",  "joint-rl",   "cascade",
                                              "sft",      "variance", "sweep-noise", "sweep-loss", "eval"};
  return names;
}

/// Writes to "<path>.partial" and renames on commit(); an abandoned file keeps
/// its .partial suffix.
class PartialFile {
 public:
  explicit PartialFile(std::filesystem::path path) : path_(std::move(path)), tmp_(path_.string() + ".partial") {
    os_.open(tmp_, std::ios::trunc);
    if (!os_) throw std::runtime_error("cannot write " + tmp_.string());
  }
  std::ostream& stream() { return os_; }
  void commit() {
    os_.close();
    std::filesystem::rename(tmp_, path_);
  }

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  std::ofstream os_;
};

inline std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Runs the pipeline stages against one output directory.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, std::filesystem::path out_dir, int threads = 1)
      : cfg_(std::move(cfg)),
        out_(std::move(out_dir)),
        threads_(std::max(1, threads)),
        tasks_(make_task_suite(cfg_.tasks)),
        sched_train_(cfg_.schedule.build()),
        sched_eval_(cfg_.eval_schedule.build()),
        root_rng_(cfg_.seed) {
    std::filesystem::create_directories(out_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& out_dir() const { return out_; }
  const std::vector<Task>& tasks() const { return tasks_; }
  const Schedule& train_schedule() const { return sched_train_; }
  const Schedule& eval_schedule() const { return sched_eval_; }
  void set_log(std::function<void(const std::string&)> log) { log_ = std::move(log); }

  void run(const std::string& stage) {
    const auto t0 = std::chrono::steady_clock::now();
    if (stage == "pretrain") run_pretrain();
    else if (stage == "teachers") run_teachers();
    else if (stage == "distill") run_distill();
    else if (stage == "joint-rl") run_joint_rl();
    else if (stage == "cascade") run_cascade();
    else if (stage == "sft") run_sft();
    else if (stage == "variance") run_variance();
    else if (stage == "sweep-noise") run_sweep_noise();
    else if (stage == "sweep-loss") run_sweep_loss();
    else if (stage == "eval") run_eval();
    else throw ConfigError("unknown stage '" + stage + "'");
    update_manifest(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  std::filesystem::path path(const std::string& name) const { return out_ / name; }
  std::string teacher_file(std::size_t m) const { return "teacher_" + std::to_string(m) + ".ckpt"; }

  VelocityField load(const std::string& name) const {
    const auto p = path(name);
    if (!std::filesystem::exists(p))
      throw MissingPrerequisite("missing artifact " + p.string() + " (run the stage that produces it first)");
    return load_checkpoint(p);
  }

  std::vector<VelocityField> load_teachers() const {
    std::vector<VelocityField> out;
    for (std::size_t m = 0; m < tasks_.size(); ++m) out.push_back(load(teacher_file(m)));
    return out;
  }

  std::vector<TeacherBinding> bind(const std::vector<VelocityField>& teachers) const {
    std::vector<TeacherBinding> b;
    for (std::size_t m = 0; m < tasks_.size(); ++m) b.push_back({&tasks_[m], &teachers[m]});
    return b;
  }

  /// ODE rewards of a field on every task, with a fixed evaluation stream.
  std::vector<EvalReport> evaluate_all(const VelocityField& vf, int cond_override = -1) const {
    std::vector<EvalReport> out;
    const Rng eval_root = root_rng_.substream("final-eval");
    for (const auto& t : tasks_) {
      Rng er = eval_root.substream("task", static_cast<std::uint64_t>(t.id));
      if (cond_override < 0) {
        out.push_back(evaluate(vf, t, sched_eval_, cfg_.eval_samples, er));
      } else {
        const auto traj = rollout_batch(vf, sched_eval_, cond_override, cfg_.eval_samples, er, false);
        out.push_back(score_samples(t, traj.terminal()));
      }
    }
    return out;
  }

 private:
  void log(const std::string& msg) const {
    if (log_) log_(msg);
  }

  void write_json(const std::string& name, const nlohmann::json& j) {
    PartialFile f(path(name));
    f.stream() << j.dump(2) << "\n";
    f.commit();
  }

  void save(const VelocityField& vf, const std::string& name) {
    const auto p = path(name);
    const auto tmp = std::filesystem::path(p.string() + ".partial");
    save_checkpoint(vf, tmp);
    std::filesystem::rename(tmp, p);
  }

  static void csv_round_rows(std::ostream& os, const RoundStats& r, const std::vector<Task>& tasks,
                             const std::string& mode) {
    for (std::size_t m = 0; m < r.task_loss.size(); ++m) {
      os << r.round << ',' << tasks[m].name << ',' << mode << ',' << fmt_num(r.task_loss[m]) << ',';
      if (r.eval_rewards) os << fmt_num((*r.eval_rewards)[m]);
      os << ',' << r.forward_evals << ',' << fmt_num(r.grad_norm) << ',' << fmt_num(r.update_norm) << ','
         << (r.stage.empty() ? "-" : r.stage) << ',' << fmt_num(r.wallclock_s) << '\n';
    }
  }
  static constexpr const char* kRoundHeader =
      "round,task,loss_mode,loss,eval_reward,fwd_evals,grad_norm,update_norm,stage,wallclock_s\n";

  // ---------------------------------------------------------------- stages

  void run_pretrain() {
    const VelocityField init = VelocityField::initialized(cfg_.net, root_rng_.substream("init"));
    PartialFile csv(path("pretrain.csv"));
    csv.stream() << "step,loss\n";
    int logged = 0;
    auto res = pretrain(init, tasks_, cfg_.pretrain, root_rng_.substream("pretrain"), [&](int s, double loss) {
      csv.stream() << s << ',' << fmt_num(loss) << '\n';
      if (s % 1000 == 0) log("pretrain step " + std::to_string(s) + " loss " + fmt_num(loss));
      ++logged;
    });
    csv.commit();
    save(res.field, "ref.ckpt");
    const std::size_t tail = std::min<std::size_t>(100, res.losses.size());
    double final_loss = 0.0;
    for (std::size_t k = res.losses.size() - tail; k < res.losses.size(); ++k) final_loss += res.losses[k] / tail;
    write_json("pretrain.json", {{"initial_loss", res.losses.empty() ? 0.0 : res.losses.front()},
                                 {"final_loss_mean_last_100", final_loss},
                                 {"forward_evals", res.forward_evals}});
  }

  void run_teachers() {
    const VelocityField ref = load("ref.ckpt");
    std::vector<RlResult> results(tasks_.size());
    std::vector<std::string> errors(tasks_.size());
    auto work = [&](std::size_t m) {
      try {
        results[m] = train_teacher(ref, tasks_[m], cfg_.rl, sched_train_, sched_eval_,
                                   root_rng_.substream("teacher", m));
      } catch (const TrainingDiverged& e) {
        save(e.last_finite, teacher_file(m) + ".diverged");
        errors[m] = e.what();
      }
    };
    run_parallel(tasks_.size(), work);
    for (std::size_t m = 0; m < tasks_.size(); ++m)
      if (!errors[m].empty()) throw NumericError("teacher " + std::to_string(m) + ": " + errors[m]);

    PartialFile csv(path("teachers.csv"));
    csv.stream() << "iter,task,mean_reward,loss,eval_reward,fwd_evals,wallclock_s\n";
    for (std::size_t m = 0; m < tasks_.size(); ++m) {
      for (const auto& it : results[m].history) {
        csv.stream() << it.iter << ',' << tasks_[m].name << ',' << fmt_num(it.tasks[0].mean_reward) << ','
                     << fmt_num(it.tasks[0].loss) << ',';
        if (it.eval_rewards) csv.stream() << fmt_num((*it.eval_rewards)[0]);
        csv.stream() << ',' << it.forward_evals << ',' << fmt_num(it.wallclock_s) << '\n';
      }
      save(results[m].field, teacher_file(m));
      log("teacher " + std::to_string(m) + " (" + tasks_[m].name + ") done");
    }
    csv.commit();
  }

  void run_distill() {
    const VelocityField ref = load("ref.ckpt");
    const auto teachers = load_teachers();
    const auto b = bind(teachers);
    PartialFile csv(path("distill.csv"));
    csv.stream() << kRoundHeader;
    const std::string mode = to_string(cfg_.distill.loss_mode);
    TrainCallbacks cb;
    cb.on_round = [&](const RoundStats& r) {
      csv_round_rows(csv.stream(), r, tasks_, mode);
      if (r.eval_rewards) log("distill round " + std::to_string(r.round));
    };
    const auto res = guarded([&] {
      return distill(ref, b, cfg_.distill, sched_train_, sched_eval_, root_rng_.substream("distill"), cb);
    }, "student.ckpt");
    csv.commit();
    save(res.field, "student.ckpt");
  }

  /// Joint RL uses the distillation round count and batch so that student
  /// forward evaluations match.
  RlConfig matched_rl_config() const {
    RlConfig rl = cfg_.rl;
    rl.iterations = cfg_.distill.rounds;
    rl.eval_every = cfg_.distill.eval_every;
    rl.eval_samples = cfg_.distill.eval_samples;
    return rl;
  }

  void run_joint_rl() {
    const VelocityField ref = load("ref.ckpt");
    PartialFile csv(path("joint_rl.csv"));
    csv.stream() << kRoundHeader;
    TrainCallbacks cb;
    cb.on_round = [&](const RoundStats& r) { csv_round_rows(csv.stream(), r, tasks_, "joint_rl"); };
    const auto res = guarded([&] {
      return train_joint_rl(ref, tasks_, matched_rl_config(), sched_train_, sched_eval_,
                            root_rng_.substream("joint-rl"), cb);
    }, "joint_rl.ckpt");
    csv.commit();
    save(res.field, "joint_rl.ckpt");
  }

  void run_cascade() {
    const VelocityField ref = load("ref.ckpt");
    std::vector<Task> ordered;
    for (int m : cfg_.cascade_order) ordered.push_back(tasks_[m]);
    PartialFile csv(path("cascade.csv"));
    csv.stream() << kRoundHeader;
    TrainCallbacks cb;
    cb.on_round = [&](const RoundStats& r) { csv_round_rows(csv.stream(), r, ordered, "cascade_rl"); };
    const auto res = guarded([&] {
      return train_cascade_rl(ref, ordered, cfg_.rl, sched_train_, sched_eval_, root_rng_.substream("cascade"), cb);
    }, "cascade.ckpt");
    csv.commit();
    save(res.train.field, "cascade.ckpt");
    nlohmann::json j;
    j["order"] = cfg_.cascade_order;
    j["task_names"] = nlohmann::json::array();
    for (const auto& t : ordered) j["task_names"].push_back(t.name);
    j["stage_rewards"] = res.stage_rewards;
    j["first_task_drop"] = res.stage_rewards.front().front() - res.stage_rewards.back().front();
    j["forward_evals"] = res.train.forward_evals;
    write_json("cascade.json", j);
  }

  void run_sft() {
    const VelocityField ref = load("ref.ckpt");
    const auto teachers = load_teachers();
    const auto b = bind(teachers);
    PartialFile csv(path("sft.csv"));
    csv.stream() << kRoundHeader;
    TrainCallbacks cb;
    cb.on_round = [&](const RoundStats& r) { csv_round_rows(csv.stream(), r, tasks_, "sft"); };
    SftConfig sft = cfg_.sft;
    sft.rounds = cfg_.distill.rounds;
    sft.eval_every = cfg_.distill.eval_every;
    sft.eval_samples = cfg_.distill.eval_samples;
    const auto res = guarded([&] {
      return train_sft_distill(ref, b, sft, sched_train_, sched_eval_, root_rng_.substream("sft"), cb);
    }, "sft.ckpt");
    csv.commit();
    save(res.field, "sft.ckpt");
  }

  void run_variance() {
    const VelocityField ref = load("ref.ckpt");
    const auto teachers = load_teachers();
    const auto& v = cfg_.variance;
    if (v.task < 0 || v.task >= static_cast<int>(tasks_.size())) throw ConfigError("variance.task out of range");
    const Schedule sched = sched_train_.with_noise_level(v.noise_level);
    if (v.step < 0 || v.step >= static_cast<int>(sched.n_steps())) throw ConfigError("variance.step out of range");
    Rng state_rng = root_rng_.substream("variance-state");
    const auto traj = rollout(ref, sched, tasks_[v.task].id, state_rng);
    const auto x = column(traj.states[v.step], 0);
    Rng est_rng = root_rng_.substream("variance-estimator");
    const auto study = estimator_study(ref, teachers[v.task], x, v.step, sched, tasks_[v.task].id, v.n_samples, est_rng);

    DistillConfig base = cfg_.distill;
    base.rounds = v.rounds;
    const auto b = bind(teachers);
    std::vector<std::uint64_t> seeds;
    for (int s = 0; s < v.seeds; ++s) seeds.push_back(root_rng_.substream("variance-seed", s).seed());
    const auto kl = update_norm_study(ref, b, LossMode::kClosedFormKl, v.noise_level, base, sched_train_, sched_eval_, seeds);
    const auto ppo = update_norm_study(ref, b, LossMode::kPpoSurrogate, v.noise_level, base, sched_train_, sched_eval_, seeds);

    auto report = [](const GradientReport& r) {
      return nlohmann::json{{"estimator", r.estimator}, {"n_samples", r.n_samples}, {"seed", r.seed},
                            {"total_variance", r.total_variance}, {"max_abs_bias", r.max_abs_bias},
                            {"max_z", r.max_z}};
    };
    auto norms = [](const UpdateNormStudy& s) {
      return nlohmann::json{{"mode", to_string(s.mode)},
                            {"mean_grad_norm_variance", s.mean_grad_norm_variance},
                            {"mean_update_norm_variance", s.mean_update_norm_variance},
                            {"grad_norms", s.grad_norms}};
    };
    write_json("variance.json", {{"state", x},
                                 {"step", v.step},
                                 {"task", v.task},
                                 {"noise_level", v.noise_level},
                                 {"pathwise", report(study.pathwise)},
                                 {"ppo", report(study.ppo)},
                                 {"score_term", report(study.score_term)},
                                 {"seeds", seeds},
                                 {"update_norms", {norms(kl), norms(ppo)}}});
  }

  static void write_series(std::ostream& os, const std::vector<SweepSeries>& series) {
    os << "series,noise_level,loss_mode,round,fwd_evals,avg_eval_reward,grad_norm,wallclock_s\n";
    for (const auto& s : series)
      for (const auto& r : s.history) {
        if (!r.eval_rewards) continue;
        double avg = 0.0;
        for (double x : *r.eval_rewards) avg += x / static_cast<double>(r.eval_rewards->size());
        os << s.label << ',' << fmt_num(s.noise_level) << ',' << to_string(s.loss_mode) << ',' << r.round << ','
           << r.forward_evals << ',' << fmt_num(avg) << ',' << fmt_num(r.grad_norm) << ',' << fmt_num(r.wallclock_s)
           << '\n';
      }
  }

  static nlohmann::json series_summary(const std::vector<SweepSeries>& series) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : series)
      j.push_back({{"label", s.label}, {"noise_level", s.noise_level}, {"loss_mode", to_string(s.loss_mode)},
                   {"final_average_reward", s.final_average_reward()},
                   {"fwd_evals", s.history.empty() ? 0 : s.history.back().forward_evals}});
    return j;
  }

  void run_sweep_noise() {
    const VelocityField ref = load("ref.ckpt");
    const auto teachers = load_teachers();
    const auto b = bind(teachers);
    DistillConfig base = cfg_.distill;
    base.rounds = cfg_.sweep.rounds;
    const auto series = noise_sweep(ref, b, cfg_.sweep.noise_levels, base, sched_train_, sched_eval_,
                                    root_rng_.substream("sweep"));
    PartialFile csv(path("sweep_noise.csv"));
    write_series(csv.stream(), series);
    csv.commit();
    write_json("sweep_noise.json", series_summary(series));
  }

  void run_sweep_loss() {
    const VelocityField ref = load("ref.ckpt");
    const auto teachers = load_teachers();
    const auto b = bind(teachers);
    DistillConfig base = cfg_.distill;
    base.rounds = cfg_.sweep.rounds;
    const auto series = loss_mode_sweep(ref, b, cfg_.sweep.loss_noise_level, base, sched_train_, sched_eval_,
                                        root_rng_.substream("sweep"));
    PartialFile csv(path("sweep_loss.csv"));
    write_series(csv.stream(), series);
    csv.commit();
    write_json("sweep_loss.json", series_summary(series));
  }

  void run_eval() {
    nlohmann::json j;
    const VelocityField ref = load("ref.ckpt");
    auto rewards = [&](const VelocityField& vf) {
      std::vector<double> r;
      for (const auto& e : evaluate_all(vf)) r.push_back(e.mean_reward);
      return r;
    };
    j["reference"] = rewards(ref);
    std::vector<double> teacher_reward;
    for (std::size_t m = 0; m < tasks_.size(); ++m) {
      const auto t = load(teacher_file(m));
      // a teacher is scored on its own condition by every task's reward
      std::vector<double> r;
      for (const auto& e : evaluate_all(t, tasks_[m].id)) r.push_back(e.mean_reward);
      j["teachers"].push_back(r);
      teacher_reward.push_back(r[m]);
    }
    j["teacher_in_domain"] = teacher_reward;
    for (const char* name : {"student", "joint_rl", "sft", "cascade"}) {
      const auto p = path(std::string(name) + ".ckpt");
      if (!std::filesystem::exists(p)) continue;
      const auto r = rewards(load_checkpoint(p));
      double norm = 0.0;
      for (std::size_t m = 0; m < r.size(); ++m) norm += r[m] / teacher_reward[m] / static_cast<double>(r.size());
      j["models"][name] = {{"rewards", r}, {"average_normalized_reward", norm}};
    }
    j["task_names"] = nlohmann::json::array();
    for (const auto& t : tasks_) j["task_names"].push_back(t.name);
    write_json("eval.json", j);
  }

  template <class F>
  std::invoke_result_t<F> guarded(F&& f, const std::string& ckpt_name) {
    try {
      return f();
    } catch (const TrainingDiverged& e) {
      save(e.last_finite, ckpt_name + ".diverged");
      throw;
    }
  }

  void run_parallel(std::size_t n, const std::function<void(std::size_t)>& work) {
    if (threads_ <= 1 || n <= 1) {
      for (std::size_t k = 0; k < n; ++k) work(k);
      return;
    }
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min<int>(threads_, static_cast<int>(n)); ++t)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t k;
          {
            std::lock_guard lock(mu);
            if (next >= n) return;
            k = next++;
          }
          work(k);
        }
      });
    for (auto& th : pool) th.join();
  }

  void update_manifest(const std::string& stage, double wallclock) {
    nlohmann::json m;
    const auto p = path("manifest.json");
    if (std::filesystem::exists(p)) {
      std::ifstream f(p);
      try {
        m = nlohmann::json::parse(f);
      } catch (...) {
        m = nlohmann::json::object();
      }
    }
    m["config_hash"] = config_hash(cfg_);
    m["version"] = kVersion;
    m["config"] = to_json(cfg_);
    m["stages"][stage] = {{"wallclock_s", wallclock}};
    write_json("manifest.json", m);
  }

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  int threads_;
  std::vector<Task> tasks_;
  Schedule sched_train_;
  Schedule sched_eval_;
  Rng root_rng_;
  std::function<void(const std::string&)> log_;
};

}  // namespace opd
