#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "opd/config.hpp"
#include "opd/experiment.hpp"

using namespace opd;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_config() {
  return json::parse(R"({
    "seed": 3,
    "schedule": {"n_steps": 4, "t_clamp_max": 0.9},
    "eval_schedule": {"n_steps": 8},
    "eval_samples": 64,
    "net": {"hidden": [16, 16]},
    "pretrain": {"steps": 20, "batch": 32},
    "rl": {"group_size": 4, "groups": 2, "iterations": 3, "eval_every": 1, "eval_samples": 16},
    "distill": {"rounds": 3, "batch_per_task": 4, "eval_every": 1, "eval_samples": 16},
    "sft": {"rounds": 2, "samples_per_task": 8, "eval_every": 1, "eval_samples": 16},
    "variance": {"n_samples": 2000, "seeds": 2, "rounds": 2},
    "sweep": {"rounds": 2}
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Drops the wallclock_s column, if the header has one.
std::string without_wallclock(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  std::getline(in, line);
  std::size_t drop = std::string::npos, k = 0;
  std::stringstream hs(line);
  for (std::string f; std::getline(hs, f, ','); ++k)
    if (f == "wallclock_s") drop = k;
  in.clear();
  in.seekg(0);
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    k = 0;
    for (std::string f; std::getline(ls, f, ','); ++k)
      if (k != drop) out += f + ",";
    out += "\n";
  }
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("opd_test_config_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("defaults and round trip", "[config]") {
  const auto c = parse_config(json::object());
  CHECK(c.seed == 1);
  CHECK(c.distill.loss_mode == LossMode::kOdeL2);
  CHECK(c.net.cond_vocab == 3);
  const auto again = parse_config(to_json(c));
  CHECK(to_json(again) == to_json(c));
  CHECK(config_hash(again) == config_hash(c));
}

TEST_CASE("config hash ignores the output directory only", "[config]") {
  auto j = tiny_config();
  const auto base = config_hash(parse_config(j));
  j["output_dir"] = "/somewhere/else";
  CHECK(config_hash(parse_config(j)) == base);
  j["seed"] = 4;
  CHECK(config_hash(parse_config(j)) != base);
}

TEST_CASE("strict schema", "[config]") {
  auto j = tiny_config();
  j["distill"]["learning_rate"] = 0.1;
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  j = tiny_config();
  j["bogus"] = 1;
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  j = tiny_config();
  j["distill"]["rounds"] = "many";
  CHECK_THROWS_AS(parse_config(j), ConfigError);
}

TEST_CASE("cross-field checks", "[config]") {
  auto j = tiny_config();
  j["distill"]["loss_mode"] = "ode_l2";
  j["distill"]["noise_level"] = 0.7;
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  j["distill"]["loss_mode"] = "closed_form_kl";
  CHECK_NOTHROW(parse_config(j));
  j["distill"]["noise_level"] = 0.0;
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  j = tiny_config();
  j["rl"]["noise_level"] = 0.0;
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  j = tiny_config();
  j["cascade"] = {{"order", {0, 5}}};
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  j = tiny_config();
  j["eval_schedule"]["noise_level"] = 0.3;
  CHECK_THROWS_AS(parse_config(j), ConfigError);
}

TEST_CASE("missing artifacts are reported as missing prerequisites", "[config][experiment]") {
  Experiment ex(parse_config(tiny_config()), fresh_dir("missing"));
  CHECK_THROWS_AS(ex.run("distill"), MissingPrerequisite);
  CHECK_THROWS_AS(ex.run("teachers"), MissingPrerequisite);
  CHECK_THROWS_AS(ex.run("no-such-stage"), ConfigError);
}

TEST_CASE("pipeline stages are reproducible", "[config][experiment]") {
  const auto cfg = parse_config(tiny_config());
  const std::vector<std::string> stages{"pretrain", "teachers",   "distill",    "joint-rl", "cascade",
                                        "sft",      "sweep-noise", "sweep-loss", "variance", "eval"};
  const auto a = fresh_dir("run_a");
  const auto b = fresh_dir("run_b");
  {
    Experiment ex(cfg, a);
    for (const auto& s : stages) ex.run(s);
  }
  {
    Experiment ex(cfg, b, 3);  // thread count must not change results
    for (const auto& s : stages) ex.run(s);
  }
  for (const char* f : {"ref.ckpt", "teacher_0.ckpt", "teacher_2.ckpt", "student.ckpt", "joint_rl.ckpt",
                        "cascade.ckpt", "sft.ckpt", "eval.json", "cascade.json", "variance.json",
                        "sweep_noise.json", "sweep_loss.json"}) {
    INFO(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  for (const char* f : {"pretrain.csv", "teachers.csv", "distill.csv", "joint_rl.csv", "cascade.csv", "sft.csv",
                        "sweep_noise.csv", "sweep_loss.csv"}) {
    INFO(f);
    CHECK(slurp(a / f).size() > 0);
    CHECK(without_wallclock(slurp(a / f)) == without_wallclock(slurp(b / f)));
  }
  const auto header = slurp(a / "distill.csv").substr(0, slurp(a / "distill.csv").find('\n'));
  CHECK(header == "round,task,loss_mode,loss,eval_reward,fwd_evals,grad_norm,update_norm,stage,wallclock_s");
  const auto manifest = json::parse(slurp(a / "manifest.json"));
  CHECK(manifest["config_hash"] == config_hash(cfg));
  for (const auto& s : stages) CHECK(manifest["stages"].contains(s));
  for (const auto& e : fs::directory_iterator(a)) CHECK(e.path().extension() != ".partial");

  const auto eval = json::parse(slurp(a / "eval.json"));
  CHECK(eval["models"].contains("student"));
  CHECK(eval["teacher_in_domain"].size() == 3);
}
