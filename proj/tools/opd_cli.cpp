// Experiment runner: opd_cli --config cfg.json --stage distill --out runs/a

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "opd/config.hpp"
#include "opd/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitMissing = 4;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"On-policy distillation experiments for 2-D flow-matching models"};
  std::string config_path;
  std::string stage;
  std::string out_dir;
  long long seed = -1;
  int threads = 1;
  bool quiet = false;
  app.add_option("--config", config_path, "experiment config (JSON)");
  app.add_option("--stage", stage, "stage to run")->required()->check(CLI::IsMember(opd::stage_names()));
  app.add_option("--seed", seed, "override the master seed");
  app.add_option("--out", out_dir, "output directory (default: $OPD_OUT_DIR, then config output_dir)");
  app.add_option("--threads", threads, "worker threads for independent runs")->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", quiet, "no progress logging");
  CLI11_PARSE(app, argc, argv);

  try {
    opd::ExperimentConfig cfg = config_path.empty() ? opd::parse_config(nlohmann::json::object())
                                                    : opd::load_config(config_path);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (out_dir.empty()) {
      if (const char* env = std::getenv("OPD_OUT_DIR")) out_dir = env;
      else out_dir = cfg.output_dir;
    }
    if (out_dir.empty()) throw opd::ConfigError("no output directory: pass --out, set OPD_OUT_DIR or output_dir");
    cfg.output_dir = out_dir;
    opd::Experiment exp(cfg, out_dir, threads);
    if (!quiet) exp.set_log([](const std::string& m) { std::cerr << "[opd] " << m << '\n'; });
    exp.run(stage);
    if (!quiet) std::cerr << "[opd] stage " << stage << " done -> " << out_dir << '\n';
    return 0;
  } catch (const opd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const opd::MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << '\n';
    return kExitMissing;
  } catch (const opd::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const opd::InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
