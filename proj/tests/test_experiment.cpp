#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedcyc/experiment.hpp"
#include "fedcyc/trace_io.hpp"

using namespace fedcyc;
namespace fs = std::filesystem;

namespace {

const char* kMinimalConfig = R"({
  "dataset": {"clients": 1, "blocks": 1, "total_samples": 120, "feature_dim": 2, "seed": 5},
  "schedule": {"cycles": 1, "rounds_per_block": 2, "local_iters": 1},
  "optimizer": {"algorithm": "mm-psgd", "gamma": 0.05, "master_seed": 9}
})";

const char* kSmallConfig = R"({
  "dataset": {"clients": 3, "blocks": 2, "total_samples": 900, "feature_dim": 3,
              "block_heterogeneity": 1.0, "seed": 4},
  "objective": {"lambda": 1.0},
  "schedule": {"cycles": 2, "rounds_per_block": 2, "local_iters": 3},
  "optimizer": {"algorithm": "mc-psgd", "gamma": 0.04, "eta": 0.06, "batch_size": 2,
                "master_seed": 12},
  "checks": {"variance_resamples": 1000}
})";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cells;
  std::istringstream cols(line);
  std::string cell;
  while (std::getline(cols, cell, '\t')) cells.push_back(cell);
  return cells;
}

}  // namespace

TEST_CASE("minimal experiment produces one trace row per round") {
  const ExperimentConfig cfg = parse_experiment_config(kMinimalConfig);
  const ExperimentOutput out = run_experiment(cfg);
  CHECK(out.result.trace.rounds.size() == 2);
  CHECK(out.spec.dim == 2);
  CHECK(out.optimizer.plan.total_iterations() == 2);

  const std::string table =
      render_trace_table(out.run_id, out.optimizer, out.result.trace, &out.comparators);
  CHECK(count_lines(table) == 3);  // header + 2 rounds
  CHECK(table.find("run_id\talgorithm\tt\t") == 0);
}

TEST_CASE("experiment reruns are byte-identical") {
  const ExperimentConfig cfg = parse_experiment_config(kSmallConfig);
  const fs::path dir_a = fresh_dir("fedcyc-exp-rerun-a");
  const fs::path dir_b = fresh_dir("fedcyc-exp-rerun-b");
  run_and_write(cfg, dir_a);
  run_and_write(cfg, dir_b);
  for (const char* name : {"config.json", "trace.tsv", "summary.json"})
    CHECK(slurp(dir_a / name) == slurp(dir_b / name));
  CHECK_FALSE(fs::exists(dir_a / "FAILED"));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("written config is a manifest that reproduces the run") {
  const ExperimentConfig cfg = parse_experiment_config(kSmallConfig);
  const fs::path dir = fresh_dir("fedcyc-exp-manifest");
  run_and_write(cfg, dir);

  const ExperimentConfig reloaded = load_experiment_config(dir / "config.json");
  const fs::path dir2 = fresh_dir("fedcyc-exp-manifest-2");
  run_and_write(reloaded, dir2);
  CHECK(slurp(dir / "trace.tsv") == slurp(dir2 / "trace.tsv"));
  CHECK(slurp(dir / "summary.json") == slurp(dir2 / "summary.json"));
  CHECK(slurp(dir / "config.json") == slurp(dir2 / "config.json"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("canonical form is idempotent and drives the run id") {
  const ExperimentConfig cfg = parse_experiment_config(kSmallConfig);
  const std::string canonical = canonical_config_json(cfg);
  const ExperimentConfig round2 = parse_experiment_config(canonical);
  CHECK(canonical_config_json(round2) == canonical);
  CHECK(compute_run_id(canonical) == compute_run_id(canonical_config_json(round2)));
  CHECK(compute_run_id(canonical).size() == 16);

  ExperimentConfig reseeded = cfg;
  reseeded.master_seed = 777;
  CHECK(compute_run_id(canonical_config_json(reseeded)) != compute_run_id(canonical));
}

TEST_CASE("parse failures") {
  CHECK_THROWS_AS(parse_experiment_config("not json at all"), ConfigParseError);
  CHECK_THROWS_AS(parse_experiment_config("[1, 2]"), ConfigParseError);
  CHECK_THROWS_AS(parse_experiment_config(R"({"dataset": {}})"), ConfigParseError);

  // Unknown keys anywhere are rejected outright.
  const char* extra_top = R"({
    "dataset": {"clients": 1, "blocks": 1, "total_samples": 10, "feature_dim": 2},
    "schedule": {"cycles": 1, "rounds_per_block": 1, "local_iters": 1},
    "optimizer": {"algorithm": "fedavg", "gamma": 0.1},
    "surprise": true
  })";
  CHECK_THROWS_AS(parse_experiment_config(extra_top), ConfigParseError);
  const char* extra_nested = R"({
    "dataset": {"clients": 1, "blocks": 1, "total_samples": 10, "feature_dim": 2, "typo_key": 1},
    "schedule": {"cycles": 1, "rounds_per_block": 1, "local_iters": 1},
    "optimizer": {"algorithm": "fedavg", "gamma": 0.1}
  })";
  CHECK_THROWS_AS(parse_experiment_config(extra_nested), ConfigParseError);

  const char* bad_type = R"({
    "dataset": {"clients": "many", "blocks": 1, "total_samples": 10, "feature_dim": 2},
    "schedule": {"cycles": 1, "rounds_per_block": 1, "local_iters": 1},
    "optimizer": {"algorithm": "fedavg", "gamma": 0.1}
  })";
  CHECK_THROWS_AS(parse_experiment_config(bad_type), ConfigParseError);

  const char* bad_algorithm = R"({
    "dataset": {"clients": 1, "blocks": 1, "total_samples": 10, "feature_dim": 2},
    "schedule": {"cycles": 1, "rounds_per_block": 1, "local_iters": 1},
    "optimizer": {"algorithm": "sgd", "gamma": 0.1}
  })";
  CHECK_THROWS_AS(parse_experiment_config(bad_algorithm), ConfigParseError);
}

TEST_CASE("validation failures") {
  ExperimentConfig cfg = parse_experiment_config(kMinimalConfig);
  cfg.cycles = 0;
  CHECK_THROWS_AS(validate_experiment_config(cfg), ConfigValidationError);

  cfg = parse_experiment_config(kMinimalConfig);
  cfg.lambda = 0.0;
  CHECK_THROWS_AS(validate_experiment_config(cfg), ConfigValidationError);

  cfg = parse_experiment_config(kMinimalConfig);
  cfg.algorithm = Algorithm::McPsgd;  // an absent eta means "theoretical" here
  CHECK_NOTHROW(validate_experiment_config(cfg));
  cfg.eta = 0.0;
  CHECK_THROWS_AS(validate_experiment_config(cfg), ConfigValidationError);

  // An eta on a non-separate-chain algorithm is rejected, including the
  // "theoretical" spelling that parses to a placeholder.
  const char* stray_eta = R"({
    "dataset": {"clients": 1, "blocks": 1, "total_samples": 10, "feature_dim": 2},
    "schedule": {"cycles": 1, "rounds_per_block": 1, "local_iters": 1},
    "optimizer": {"algorithm": "mm-psgd", "gamma": 0.1, "eta": "theoretical"}
  })";
  CHECK_THROWS_AS(validate_experiment_config(parse_experiment_config(stray_eta)), ConfigValidationError);

  // The theoretical step size needs enough rounds per block relative to the
  // participant count; a tiny schedule is refused rather than silently run.
  const char* starved = R"({
    "dataset": {"clients": 8, "blocks": 2, "total_samples": 400, "feature_dim": 2},
    "schedule": {"cycles": 1, "rounds_per_block": 1, "local_iters": 1},
    "optimizer": {"algorithm": "mm-psgd", "gamma": "theoretical"}
  })";
  CHECK_THROWS_AS(validate_experiment_config(parse_experiment_config(starved)), ConfigValidationError);
}

TEST_CASE("theoretical rates and max local iterations resolve from the schedule") {
  const char* theoretical = R"({
    "dataset": {"clients": 2, "blocks": 2, "total_samples": 2000, "feature_dim": 2, "seed": 8},
    "schedule": {"cycles": 25, "rounds_per_block": 40, "local_iters": "max"},
    "optimizer": {"algorithm": "mc-psgd", "gamma": "theoretical", "eta": "theoretical",
                  "master_seed": 3, "trace_metrics": "none"},
    "checks": {"deviation_bound": false, "variance_scaling": false, "reduction": false}
  })";
  const ExperimentConfig cfg = parse_experiment_config(theoretical);
  CHECK_FALSE(cfg.gamma.has_value());
  CHECK_FALSE(cfg.local_iters.has_value());

  const ExperimentOutput out = run_experiment(cfg);
  const std::int64_t T = out.optimizer.plan.total_iterations();
  CHECK(out.optimizer.gamma ==
        doctest::Approx(theoretical_gamma(2, T, out.constants.L)).epsilon(1e-12));
  REQUIRE(out.optimizer.eta.has_value());
  CHECK(*out.optimizer.eta ==
        doctest::Approx(theoretical_eta(2, 2, T, out.constants.L)).epsilon(1e-12));
  CHECK(out.optimizer.plan.local_iters ==
        max_local_iterations(T, 2, 2, Algorithm::McPsgd));

  // The canonical form remembers the request, not the resolved numbers.
  const std::string canonical = canonical_config_json(cfg);
  CHECK(canonical.find("\"gamma\": \"theoretical\"") != std::string::npos);
  CHECK(canonical.find("\"local_iters\": \"max\"") != std::string::npos);
}

TEST_CASE("check statuses reflect the configuration") {
  ExperimentConfig cfg = parse_experiment_config(kSmallConfig);
  const ExperimentOutput out = run_experiment(cfg);
  CHECK(out.checks.deviation_status == "passed");
  CHECK(out.checks.variance_status == "passed");
  CHECK(out.checks.reduction_status == "not applicable");

  cfg.checks.deviation_bound = false;
  cfg.checks.variance_scaling = false;
  cfg.checks.reduction = false;
  const ExperimentOutput off = run_experiment(cfg);
  CHECK(off.checks.deviation_status == "skipped");
  CHECK(off.checks.variance_status == "skipped");
  CHECK(off.checks.reduction_status == "skipped");

  const char* sequential = R"({
    "dataset": {"clients": 1, "blocks": 1, "total_samples": 150, "feature_dim": 2, "seed": 2},
    "schedule": {"cycles": 1, "rounds_per_block": 4, "local_iters": 1},
    "optimizer": {"algorithm": "fedavg", "gamma": 0.05, "full_batch": true, "master_seed": 6},
    "checks": {"variance_resamples": 1000}
  })";
  const ExperimentOutput seq = run_experiment(parse_experiment_config(sequential));
  CHECK(seq.checks.reduction_status == "passed");
  CHECK(seq.checks.reduction_error <= 1e-10);
}

TEST_CASE("seed override changes only the stochastic story") {
  const ExperimentConfig base = parse_experiment_config(kSmallConfig);
  ExperimentConfig reseeded = base;
  reseeded.master_seed = base.master_seed + 1;

  const ExperimentOutput a = run_experiment(base);
  const ExperimentOutput b = run_experiment(reseeded);
  CHECK(a.run_id != b.run_id);
  CHECK(a.optimizer.gamma == b.optimizer.gamma);
  CHECK(a.constants.L == b.constants.L);
  CHECK(a.comparators.global_value == b.comparators.global_value);
  CHECK((a.result.final_global - b.result.final_global).norm() > 0.0);
}

TEST_CASE("run directory report lists every block gap") {
  const ExperimentConfig cfg = parse_experiment_config(kSmallConfig);
  const fs::path dir = fresh_dir("fedcyc-exp-report");
  run_and_write(cfg, dir);
  const std::string report = render_report(dir);
  CHECK(report.find("block 1 gap:") != std::string::npos);
  CHECK(report.find("block 2 gap:") != std::string::npos);
  CHECK(report.find("minimax gap:") != std::string::npos);
  CHECK(report.find("deviation bound: passed") != std::string::npos);
  CHECK(slurp(dir / "report.txt") == report);
  fs::remove_all(dir);
}

TEST_CASE("single value sweep matches the plain run byte for byte") {
  const ExperimentConfig cfg = parse_experiment_config(kSmallConfig);
  const fs::path run_dir = fresh_dir("fedcyc-exp-single-run");
  run_and_write(cfg, run_dir);

  const fs::path sweep_dir = fresh_dir("fedcyc-exp-single-sweep");
  SweepOptions options;
  options.axis = "cycles";
  options.values = {2.0};
  run_sweep(cfg, options, sweep_dir);

  for (const char* name : {"config.json", "trace.tsv", "summary.json"})
    CHECK(slurp(run_dir / name) == slurp(sweep_dir / "cycles-2" / name));
  CHECK(fs::exists(sweep_dir / "summary.tsv"));
  fs::remove_all(run_dir);
  fs::remove_all(sweep_dir);
}

TEST_CASE("local iteration sweep records rounds to threshold") {
  const ExperimentConfig cfg = parse_experiment_config(kSmallConfig);
  const fs::path dir = fresh_dir("fedcyc-exp-li-sweep");
  SweepOptions options;
  options.axis = "local_iters";
  options.values = {5.0, 10.0};
  options.gap_threshold = 1e6;  // trivially reachable: first full-metrics round qualifies
  const std::string table = run_sweep(cfg, options, dir);

  std::istringstream lines(table);
  std::string header, row1, row2;
  std::getline(lines, header);
  std::getline(lines, row1);
  std::getline(lines, row2);
  const std::vector<std::string> head = split_tabs(header);
  const std::vector<std::string> cells1 = split_tabs(row1);
  const std::vector<std::string> cells2 = split_tabs(row2);
  REQUIRE(head.size() == cells1.size());
  const auto col = static_cast<std::size_t>(
      std::find(head.begin(), head.end(), "rounds_to_threshold") - head.begin());
  REQUIRE(col < head.size());
  CHECK(head[0] == "axis");
  CHECK(cells1[0] == "local_iters");
  CHECK(cells1[1] == "5");
  CHECK(cells2[1] == "10");
  // Threshold is huge, so both runs hit it on their first recorded round.
  CHECK(cells1[col] == "1");
  CHECK(cells2[col] == "1");

  const std::string report = render_report(dir);
  CHECK(report.find("local_iters") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("block sweep holds the total iteration budget fixed") {
  const char* base = R"({
    "dataset": {"clients": 2, "blocks": 2, "total_samples": 800, "feature_dim": 2, "seed": 5},
    "schedule": {"cycles": 2, "rounds_per_block": 6, "local_iters": 2},
    "optimizer": {"algorithm": "mm-psgd", "gamma": 0.05, "master_seed": 4},
    "checks": {"variance_resamples": 1000}
  })";
  const ExperimentConfig cfg = parse_experiment_config(base);
  const fs::path dir = fresh_dir("fedcyc-exp-block-sweep");
  SweepOptions options;
  options.axis = "blocks";
  options.values = {1.0, 2.0, 3.0};
  const std::string table = run_sweep(cfg, options, dir);

  std::istringstream lines(table);
  std::string line;
  std::getline(lines, line);  // header
  std::vector<std::string> totals;
  while (std::getline(lines, line)) {
    std::istringstream cols(line);
    std::string cell;
    for (int i = 0; i < 4; ++i) std::getline(cols, cell, '\t');
    totals.push_back(cell);
  }
  REQUIRE(totals.size() == 3);
  CHECK(totals[0] == totals[1]);
  CHECK(totals[1] == totals[2]);
  fs::remove_all(dir);

  // A budget that cannot be split across the requested block count is an error.
  SweepOptions bad = options;
  bad.values = {5.0};
  const fs::path dir2 = fresh_dir("fedcyc-exp-block-sweep-bad");
  CHECK_THROWS_AS(run_sweep(cfg, bad, dir2), ConfigValidationError);
  fs::remove_all(dir2);

  SweepOptions unknown;
  unknown.axis = "flux";
  unknown.values = {1.0};
  const fs::path dir3 = fresh_dir("fedcyc-exp-axis-bad");
  CHECK_THROWS_AS(run_sweep(cfg, unknown, dir3), ConfigValidationError);
  fs::remove_all(dir3);
}

TEST_CASE("shuffled flag routes training onto the homogenized dataset") {
  const char* shuffled_cfg = R"({
    "dataset": {"clients": 3, "blocks": 2, "total_samples": 900, "feature_dim": 3,
                "block_heterogeneity": 2.0, "seed": 4, "shuffle": true},
    "schedule": {"cycles": 1, "rounds_per_block": 2, "local_iters": 2},
    "optimizer": {"algorithm": "mm-psgd", "gamma": 0.04, "master_seed": 12},
    "checks": {"variance_resamples": 1000}
  })";
  const ExperimentOutput out = run_experiment(parse_experiment_config(shuffled_cfg));
  // Pooled blocks have nearly identical optima, so every block gap is small
  // relative to the heterogeneous counterpart's spread.
  const double spread =
      *std::max_element(out.gaps.block_gaps.begin(), out.gaps.block_gaps.end());
  CHECK(spread < 1.0);
  CHECK(out.checks.variance_status == "passed");
}
