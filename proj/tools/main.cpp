// Command-line front end: single runs, axis sweeps, and sweep reports.
//
// Exit codes: 0 success, 2 configuration parse error, 3 configuration
// validation error, 4 failed oracle or runtime check, 1 anything else.
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedcyc/experiment.hpp"

namespace {

bool any_check_failed(const fedcyc::ExperimentOutput& output) {
  return output.checks.deviation_status == "failed" || output.checks.variance_status == "failed" ||
         output.checks.reduction_status == "failed";
}

void disable_checks(fedcyc::ExperimentConfig& config) {
  config.checks.deviation_bound = false;
  config.checks.variance_scaling = false;
  config.checks.reduction = false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"simulator for federated optimization over block-cyclic client data"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string in_dir;
  std::string axis;
  std::string checks = "on";
  std::vector<double> values;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;

  CLI::App* run = app.add_subcommand("run", "run one experiment and write its outputs");
  run->add_option("--config", config_path, "experiment configuration (JSON)")->required();
  run->add_option("--out", out_dir, "output directory")->required();
  run->add_option("--seed", seed, "override optimizer.master_seed");
  run->add_option("--checks", checks, "toggle runtime checks")->check(CLI::IsMember({"on", "off"}));

  CLI::App* sweep = app.add_subcommand("sweep", "run the configuration once per axis value");
  sweep->add_option("--config", config_path, "base experiment configuration (JSON)")->required();
  sweep->add_option("--out", out_dir, "output directory")->required();
  sweep->add_option("--axis", axis, "cycles | local_iters | blocks | clients | participation_rate")
      ->required();
  sweep->add_option("--values", values, "comma-separated axis values")->required()->delimiter(',');
  sweep->add_option("--seed", seed, "override optimizer.master_seed");
  sweep->add_option("--checks", checks, "toggle runtime checks")->check(CLI::IsMember({"on", "off"}));
  sweep->add_option("--threshold", threshold, "flag runs whose minimax gap exceeds this value");

  CLI::App* report = app.add_subcommand("report", "render the report for a finished sweep");
  report->add_option("--in", in_dir, "sweep output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // --help/--version stay 0; usage errors are exit 2
  }

  try {
    if (run->parsed()) {
      fedcyc::ExperimentConfig cfg = fedcyc::load_experiment_config(config_path);
      if (seed) cfg.master_seed = *seed;
      if (checks == "off") disable_checks(cfg);
      const fedcyc::ExperimentOutput output = fedcyc::run_and_write(cfg, out_dir);
      std::cout << fedcyc::render_summary_json(output);
      if (any_check_failed(output)) {
        std::cerr << "error: a runtime check failed, see summary.json\n";
        return 4;
      }
      return 0;
    }
    if (sweep->parsed()) {
      fedcyc::ExperimentConfig cfg = fedcyc::load_experiment_config(config_path);
      if (seed) cfg.master_seed = *seed;
      if (checks == "off") disable_checks(cfg);
      fedcyc::SweepOptions options;
      options.axis = axis;
      options.values = values;
      options.gap_threshold = threshold;
      std::cout << fedcyc::run_sweep(cfg, options, out_dir);
      return 0;
    }
    std::cout << fedcyc::render_report(in_dir);
    return 0;
  } catch (const fedcyc::ConfigParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fedcyc::ConfigValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const fedcyc::OracleError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
