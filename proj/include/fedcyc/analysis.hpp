// Post-run analysis: comparator optima, optimality-gap reports, convergence
// slope fits, and the statistical checks used by the test harness.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedcyc/algorithms.hpp"
#include "fedcyc/datagen.hpp"
#include "fedcyc/objectives.hpp"

namespace fedcyc {

// Exact minimizers the optimality gaps are measured against: the global
// optimum of the pooled objective and one optimum per block.
struct Comparators {
  Vector global_optimum;
  double global_value = 0.0;
  std::vector<Vector> block_optima;
  std::vector<double> block_values;
};

Comparators solve_comparators(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                              const SolveOptions& options = {});

// Gap report for a finished run. `minimax_gap` compares the average of the
// per-block predictor losses against the value of the single best global
// model; `fedavg_gap` is the plain global suboptimality of the final model.
struct GapReport {
  std::vector<double> block_gaps;   // F_m(predictor_m) - F_m(block optimum)
  double minimax_gap = 0.0;         // mean_m F_m(predictor_m) - F(global optimum)
  double fedavg_gap = 0.0;          // F(final model) - F(global optimum)
};

GapReport gap_report(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                     const RunResult& result, const Comparators& comparators);

// Least-squares fit of log(gap) against log(T). Requires at least three
// points with positive gaps and distinct horizons.
struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

SlopeFit fit_slope(std::span<const double> horizons, std::span<const double> gaps);

// Verifies that every recorded round satisfies the deviation bound
// dev_t^2 <= 4 * gamma^2 * I^2 * Ghat^2 where Ghat^2 is the running maximum
// of the squared scaled minibatch gradient norms up to that round.
struct DeviationCheck {
  bool passed = true;
  double worst_ratio = 0.0;  // max over rounds of dev^2 / bound; 0 when bound is 0 everywhere
  std::int64_t worst_round = 0;
};

DeviationCheck check_deviation_bound(const RunTrace& trace, double gamma, std::int64_t local_iters);

// Empirical check that averaging N scaled client gradients shrinks the
// gradient variance like 1/N. Resamples random distinct client subsets from
// the first block of `data` and compares against the single-client variance.
struct VarianceRow {
  std::int64_t participants = 0;
  double variance = 0.0;
  double bound = 0.0;  // 1.5 * variance(1) / participants
  bool within_bound = true;
};

struct VarianceCheck {
  bool passed = true;
  std::vector<VarianceRow> rows;
};

VarianceCheck check_variance_scaling(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                                     std::span<const std::int64_t> participant_counts,
                                     std::int64_t resamples, std::uint64_t seed);

// Replays one round of single-client full-batch training as a plain gradient
// descent recurrence and compares against the recorded trace, round by round.
// Returns the largest absolute deviation across all rounds and coordinates.
double reduction_oracle_sequential(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                                   const OptimizerConfig& config, const RunTrace& trace);

}  // namespace fedcyc
