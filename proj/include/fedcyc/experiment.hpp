// Experiment orchestration: JSON configuration, the end-to-end run pipeline
// (data generation, constant estimation, training, gap analysis, checks),
// deterministic output directories, parameter sweeps, and text reports.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcyc/algorithms.hpp"
#include "fedcyc/analysis.hpp"
#include "fedcyc/datagen.hpp"

namespace fedcyc {

// Malformed configuration text: invalid JSON, unknown keys, wrong types.
class ConfigParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed configuration with inadmissible values.
class ConfigValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckSettings {
  bool deviation_bound = true;
  bool variance_scaling = true;
  bool reduction = true;
  std::int64_t variance_resamples = 2000;
  std::vector<std::int64_t> variance_counts;  // empty: {1, clients}
};

struct ExperimentConfig {
  DataGenConfig dataset;
  bool shuffle = false;

  double lambda = 1.0;
  std::optional<double> projection_radius;

  std::int64_t cycles = 1;
  std::int64_t rounds_per_block = 1;
  std::optional<std::int64_t> local_iters;  // nullopt: largest admissible value

  Algorithm algorithm = Algorithm::MmPsgd;
  std::optional<double> gamma;  // nullopt: theoretical rate
  std::optional<double> eta;    // mc-psgd only; nullopt: theoretical rate
  std::int64_t batch_size = 1;
  bool full_batch = false;
  AveragingMode averaging = AveragingMode::Uniform;
  double ewa_base = 0.5;
  double participation_rate = 1.0;
  int threads = 1;
  std::uint64_t master_seed = 1;
  TraceMetrics trace_metrics = TraceMetrics::Full;

  CheckSettings checks;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Semantic validation beyond parsing; throws ConfigValidationError.
void validate_experiment_config(const ExperimentConfig& config);

// Canonical JSON echo of a configuration: fixed key order, every field
// explicit. Two configurations with equal canonical text run identically.
std::string canonical_config_json(const ExperimentConfig& config);

// Hash of the canonical configuration text, 16 hex digits.
std::string compute_run_id(const std::string& canonical_config);

struct CheckReport {
  std::string deviation_status = "skipped";  // passed | failed | skipped
  DeviationCheck deviation;
  std::string variance_status = "skipped";
  VarianceCheck variance;
  std::string reduction_status = "not applicable";  // passed | failed | skipped | not applicable
  double reduction_error = 0.0;
};

struct ExperimentOutput {
  std::string run_id;
  std::string canonical_config;
  ExperimentConfig config;
  ObjectiveSpec spec;
  OptimizerConfig optimizer;  // fully resolved rates and schedule
  ProblemConstants constants;
  Comparators comparators;
  RunResult result;
  GapReport gaps;
  CheckReport checks;
};

ExperimentOutput run_experiment(const ExperimentConfig& config);

std::string render_summary_json(const ExperimentOutput& output);

// Writes config.json, trace.tsv and summary.json into `dir` (created if
// missing). A failure after the directory exists leaves a FAILED file with
// the error text instead of partial results.
void write_run(const std::filesystem::path& dir, const ExperimentOutput& output);

// Convenience: run + write, returns the output.
ExperimentOutput run_and_write(const ExperimentConfig& config, const std::filesystem::path& dir);

struct SweepOptions {
  std::string axis;  // cycles | local_iters | blocks | clients | participation_rate
  std::vector<double> values;
  std::optional<double> gap_threshold;  // default: 2x the smallest positive minimax gap in the sweep
};

// Runs the base configuration once per axis value (blocks rescales
// rounds_per_block to keep blocks * rounds_per_block fixed), writes one
// subdirectory per value plus summary.tsv, and returns the summary text.
std::string run_sweep(const ExperimentConfig& base, const SweepOptions& options,
                      const std::filesystem::path& out_dir);

// Renders the human-readable report for a run directory (gap report, check
// verdicts, and a log-log slope fit of the minimax gap over per-cycle trace
// checkpoints) or for a sweep directory (aligned summary table plus a slope
// fit across horizons when at least three are present). Writes report.txt
// into the directory and returns the text.
std::string render_report(const std::filesystem::path& dir);

}  // namespace fedcyc
