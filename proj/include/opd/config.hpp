#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "opd/error.hpp"
#include "opd/net.hpp"
#include "opd/opd_trainer.hpp"
#include "opd/pretrain.hpp"
#include "opd/rl_teacher.hpp"
#include "opd/schedule.hpp"
#include "opd/tasks.hpp"

namespace opd {

struct ScheduleSpec {
  int n_steps = 10;
  double noise_level = 0.0;
  double t_clamp_max = 0.9;

  Schedule build() const { return make_uniform_schedule(n_steps, noise_level, t_clamp_max); }
};

struct VarianceSpec {
  int task = 0;
  int step = 2;
  double noise_level = 0.7;
  long n_samples = 100000;
  int seeds = 8;
  int rounds = 60;
};

struct SweepSpec {
  std::vector<double> noise_levels{0.0, 0.1, 0.7};
  double loss_noise_level = 0.7;
  int rounds = 500;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  int dim = 2;
  std::string output_dir;
  ScheduleSpec schedule;
  ScheduleSpec eval_schedule{40, 0.0, 0.9};
  int eval_samples = 2048;
  NetArch net;
  TaskSuiteSpec tasks;
  PretrainConfig pretrain{.steps = 6000, .batch = 256, .adam = {.lr = 2e-3}, .cosine_decay = true};
  RlConfig rl{.group_size = 16, .groups = 4, .iterations = 400, .adam = {.lr = 5e-4}};
  std::vector<int> cascade_order{0, 2, 1};
  DistillConfig distill{.rounds = 500, .adam = {.lr = 1e-3}};
  SftConfig sft{.rounds = 500, .samples_per_task = 1280, .adam = {.lr = 1e-3}};
  VarianceSpec variance;
  SweepSpec sweep;
};

namespace detail {

using nlohmann::json;

/// Rejects keys outside the allowed set so typos fail loudly.
inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError("unknown config key '" + where + "." + it.key() + "'");
}

template <class T>
void get(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + where + "." + key + "': " + e.what());
  }
}

inline void read_adam(const json& j, const char* key, AdamConfig& a, const std::string& where) {
  get(j, key, a.lr, where);
}

inline void read_schedule(const json& j, ScheduleSpec& s, const std::string& where) {
  check_keys(j, where, {"n_steps", "noise_level", "t_clamp_max"});
  get(j, "n_steps", s.n_steps, where);
  get(j, "noise_level", s.noise_level, where);
  get(j, "t_clamp_max", s.t_clamp_max, where);
}

inline json schedule_json(const ScheduleSpec& s) {
  return {{"n_steps", s.n_steps}, {"noise_level", s.noise_level}, {"t_clamp_max", s.t_clamp_max}};
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& root) {
  using detail::get;
  ExperimentConfig c;
  detail::check_keys(root, "config",
                     {"seed", "dim", "output_dir", "schedule", "eval_schedule", "eval_samples", "net", "tasks",
                      "pretrain", "rl", "cascade", "distill", "sft", "variance", "sweep"});
  get(root, "seed", c.seed, "config");
  get(root, "dim", c.dim, "config");
  get(root, "output_dir", c.output_dir, "config");
  get(root, "eval_samples", c.eval_samples, "config");
  if (root.contains("schedule")) detail::read_schedule(root["schedule"], c.schedule, "schedule");
  if (root.contains("eval_schedule")) detail::read_schedule(root["eval_schedule"], c.eval_schedule, "eval_schedule");

  if (root.contains("net")) {
    const auto& j = root["net"];
    detail::check_keys(j, "net", {"hidden", "activation", "time_embedding", "n_frequencies"});
    get(j, "hidden", c.net.hidden, "net");
    get(j, "n_frequencies", c.net.n_frequencies, "net");
    std::string act = "silu", emb = "fourier";
    get(j, "activation", act, "net");
    get(j, "time_embedding", emb, "net");
    if (act == "silu") c.net.activation = Activation::kSilu;
    else if (act == "tanh") c.net.activation = Activation::kTanh;
    else throw ConfigError("net.activation must be 'silu' or 'tanh'");
    if (emb == "fourier") c.net.time_embedding = TimeEmbedding::kFourier;
    else if (emb == "raw") c.net.time_embedding = TimeEmbedding::kRaw;
    else throw ConfigError("net.time_embedding must be 'fourier' or 'raw'");
  }

  if (root.contains("tasks")) {
    const auto& j = root["tasks"];
    detail::check_keys(j, "tasks", {"type", "rewards", "n_modes", "radius", "mode_std", "phase", "upper_width",
                                    "ring_width", "east_width", "east_modes"});
    std::string type = "ring8";
    get(j, "type", type, "tasks");
    if (type != "ring8") throw ConfigError("tasks.type must be 'ring8'");
    get(j, "rewards", c.tasks.rewards, "tasks");
    get(j, "n_modes", c.tasks.n_modes, "tasks");
    get(j, "radius", c.tasks.radius, "tasks");
    get(j, "mode_std", c.tasks.mode_std, "tasks");
    get(j, "phase", c.tasks.phase, "tasks");
    get(j, "upper_width", c.tasks.upper_width, "tasks");
    get(j, "ring_width", c.tasks.ring_width, "tasks");
    get(j, "east_width", c.tasks.east_width, "tasks");
    get(j, "east_modes", c.tasks.east_modes, "tasks");
  }

  if (root.contains("pretrain")) {
    const auto& j = root["pretrain"];
    detail::check_keys(j, "pretrain", {"steps", "batch", "lr", "cosine_decay"});
    get(j, "steps", c.pretrain.steps, "pretrain");
    get(j, "batch", c.pretrain.batch, "pretrain");
    get(j, "cosine_decay", c.pretrain.cosine_decay, "pretrain");
    detail::read_adam(j, "lr", c.pretrain.adam, "pretrain");
  }

  if (root.contains("rl")) {
    const auto& j = root["rl"];
    detail::check_keys(j, "rl", {"group_size", "groups", "iterations", "clip_eps", "noise_level", "kl_weight", "lr",
                                 "eval_every", "eval_samples"});
    get(j, "group_size", c.rl.group_size, "rl");
    get(j, "groups", c.rl.groups, "rl");
    get(j, "iterations", c.rl.iterations, "rl");
    get(j, "clip_eps", c.rl.clip_eps, "rl");
    get(j, "noise_level", c.rl.noise_level, "rl");
    get(j, "kl_weight", c.rl.kl_weight, "rl");
    get(j, "eval_every", c.rl.eval_every, "rl");
    get(j, "eval_samples", c.rl.eval_samples, "rl");
    detail::read_adam(j, "lr", c.rl.adam, "rl");
  }

  if (root.contains("cascade")) {
    const auto& j = root["cascade"];
    detail::check_keys(j, "cascade", {"order"});
    get(j, "order", c.cascade_order, "cascade");
  }

  if (root.contains("distill")) {
    const auto& j = root["distill"];
    detail::check_keys(j, "distill", {"rounds", "batch_per_task", "noise_level", "loss_mode", "accumulation",
                                      "shuffle_tasks", "clip_eps", "divide_by_steps", "lr", "eval_every",
                                      "eval_samples"});
    get(j, "rounds", c.distill.rounds, "distill");
    get(j, "batch_per_task", c.distill.batch_per_task, "distill");
    get(j, "noise_level", c.distill.noise_level, "distill");
    get(j, "accumulation", c.distill.accumulation, "distill");
    get(j, "shuffle_tasks", c.distill.shuffle_tasks, "distill");
    get(j, "clip_eps", c.distill.clip_eps, "distill");
    get(j, "divide_by_steps", c.distill.reduction.divide_by_steps, "distill");
    get(j, "eval_every", c.distill.eval_every, "distill");
    get(j, "eval_samples", c.distill.eval_samples, "distill");
    detail::read_adam(j, "lr", c.distill.adam, "distill");
    if (j.contains("loss_mode")) {
      try {
        c.distill.loss_mode = loss_mode_from_string(j["loss_mode"].get<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError(std::string("distill.loss_mode: ") + e.what());
      }
    }
  }

  if (root.contains("sft")) {
    const auto& j = root["sft"];
    detail::check_keys(j, "sft", {"rounds", "samples_per_task", "lr", "eval_every", "eval_samples"});
    get(j, "rounds", c.sft.rounds, "sft");
    get(j, "samples_per_task", c.sft.samples_per_task, "sft");
    get(j, "eval_every", c.sft.eval_every, "sft");
    get(j, "eval_samples", c.sft.eval_samples, "sft");
    detail::read_adam(j, "lr", c.sft.adam, "sft");
  }

  if (root.contains("variance")) {
    const auto& j = root["variance"];
    detail::check_keys(j, "variance", {"task", "step", "noise_level", "n_samples", "seeds", "rounds"});
    get(j, "task", c.variance.task, "variance");
    get(j, "step", c.variance.step, "variance");
    get(j, "noise_level", c.variance.noise_level, "variance");
    get(j, "n_samples", c.variance.n_samples, "variance");
    get(j, "seeds", c.variance.seeds, "variance");
    get(j, "rounds", c.variance.rounds, "variance");
  }

  if (root.contains("sweep")) {
    const auto& j = root["sweep"];
    detail::check_keys(j, "sweep", {"noise_levels", "loss_noise_level", "rounds"});
    get(j, "noise_levels", c.sweep.noise_levels, "sweep");
    get(j, "loss_noise_level", c.sweep.loss_noise_level, "sweep");
    get(j, "rounds", c.sweep.rounds, "sweep");
  }

  c.net.dim = c.dim;
  c.tasks.dim = c.dim;
  c.net.cond_vocab = static_cast<int>(c.tasks.rewards.size());

  // cross-field checks
  try {
    (void)c.schedule.build();
    (void)c.eval_schedule.build();
    if (c.eval_schedule.noise_level != 0.0) throw ConfigError("eval_schedule.noise_level must be 0");
    if (c.schedule.noise_level != 0.0)
      throw ConfigError("schedule.noise_level must be 0; per-stage noise levels live in rl/distill");
    c.rl.validate();
    c.distill.validate();
    if (c.tasks.rewards.empty()) throw ConfigError("tasks.rewards must not be empty");
    (void)make_task_suite(c.tasks);
    (void)VelocityField(c.net);
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  for (int m : c.cascade_order)
    if (m < 0 || m >= static_cast<int>(c.tasks.rewards.size())) throw ConfigError("cascade.order names an unknown task");
  if (c.eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return parse_config(j);
}

/// Canonical JSON of the fully resolved config (defaults filled in).
inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  return json{
      {"seed", c.seed},
      {"dim", c.dim},
      {"output_dir", c.output_dir},
      {"schedule", detail::schedule_json(c.schedule)},
      {"eval_schedule", detail::schedule_json(c.eval_schedule)},
      {"eval_samples", c.eval_samples},
      {"net",
       {{"hidden", c.net.hidden},
        {"activation", c.net.activation == Activation::kSilu ? "silu" : "tanh"},
        {"time_embedding", c.net.time_embedding == TimeEmbedding::kFourier ? "fourier" : "raw"},
        {"n_frequencies", c.net.n_frequencies}}},
      {"tasks",
       {{"type", "ring8"},
        {"rewards", c.tasks.rewards},
        {"n_modes", c.tasks.n_modes},
        {"radius", c.tasks.radius},
        {"mode_std", c.tasks.mode_std},
        {"phase", c.tasks.phase},
        {"upper_width", c.tasks.upper_width},
        {"ring_width", c.tasks.ring_width},
        {"east_width", c.tasks.east_width},
        {"east_modes", c.tasks.east_modes}}},
      {"pretrain",
       {{"steps", c.pretrain.steps},
        {"batch", c.pretrain.batch},
        {"lr", c.pretrain.adam.lr},
        {"cosine_decay", c.pretrain.cosine_decay}}},
      {"rl",
       {{"group_size", c.rl.group_size},
        {"groups", c.rl.groups},
        {"iterations", c.rl.iterations},
        {"clip_eps", c.rl.clip_eps},
        {"noise_level", c.rl.noise_level},
        {"kl_weight", c.rl.kl_weight},
        {"lr", c.rl.adam.lr},
        {"eval_every", c.rl.eval_every},
        {"eval_samples", c.rl.eval_samples}}},
      {"cascade", {{"order", c.cascade_order}}},
      {"distill",
       {{"rounds", c.distill.rounds},
        {"batch_per_task", c.distill.batch_per_task},
        {"noise_level", c.distill.noise_level},
        {"loss_mode", to_string(c.distill.loss_mode)},
        {"accumulation", c.distill.accumulation},
        {"shuffle_tasks", c.distill.shuffle_tasks},
        {"clip_eps", c.distill.clip_eps},
        {"divide_by_steps", c.distill.reduction.divide_by_steps},
        {"lr", c.distill.adam.lr},
        {"eval_every", c.distill.eval_every},
        {"eval_samples", c.distill.eval_samples}}},
      {"sft",
       {{"rounds", c.sft.rounds},
        {"samples_per_task", c.sft.samples_per_task},
        {"lr", c.sft.adam.lr},
        {"eval_every", c.sft.eval_every},
        {"eval_samples", c.sft.eval_samples}}},
      {"variance",
       {{"task", c.variance.task},
        {"step", c.variance.step},
        {"noise_level", c.variance.noise_level},
        {"n_samples", c.variance.n_samples},
        {"seeds", c.variance.seeds},
        {"rounds", c.variance.rounds}}},
      {"sweep",
       {{"noise_levels", c.sweep.noise_levels},
        {"loss_noise_level", c.sweep.loss_noise_level},
        {"rounds", c.sweep.rounds}}},
  };
}

/// Hash of the canonical config with output_dir excluded.
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  const std::uint64_t h = detail::fnv1a(j.dump());
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace opd
