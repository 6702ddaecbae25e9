#include "fedcyc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "fedcyc/rng.hpp"
#include "fedcyc/schedule.hpp"

namespace fedcyc {

Comparators solve_comparators(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                              const SolveOptions& options) {
  Comparators out;
  const std::vector<WeightedGroup> pooled = data.pooled_groups();
  out.global_optimum = solve_optimum(spec, pooled, options);
  out.global_value = empirical_block_objective(spec, out.global_optimum, pooled);
  out.block_optima.reserve(data.blocks());
  out.block_values.reserve(data.blocks());
  for (std::int64_t m = 1; m <= data.blocks(); ++m) {
    const std::vector<WeightedGroup> groups = data.block_groups(m);
    Vector opt = solve_optimum(spec, groups, options);
    out.block_values.push_back(empirical_block_objective(spec, opt, groups));
    out.block_optima.push_back(std::move(opt));
  }
  return out;
}

GapReport gap_report(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                     const RunResult& result, const Comparators& comparators) {
  const std::int64_t blocks = data.blocks();
  if (static_cast<std::int64_t>(result.predictors.predictors.size()) != blocks ||
      static_cast<std::int64_t>(comparators.block_optima.size()) != blocks)
    throw std::invalid_argument("gap_report: predictor / comparator count does not match the dataset");
  GapReport report;
  report.block_gaps.resize(blocks);
  double mean_predictor_value = 0.0;
  for (std::int64_t m = 1; m <= blocks; ++m) {
    const double value = block_objective(spec, result.predictors.predictors[m - 1], data, m);
    const double gap = value - comparators.block_values[m - 1];
    if (gap < -1e-8)
      throw OracleError("gap_report: block " + std::to_string(m) +
                        " predictor beats the solved block optimum by " + std::to_string(-gap));
    report.block_gaps[m - 1] = gap;
    mean_predictor_value += value;
  }
  mean_predictor_value /= static_cast<double>(blocks);
  report.minimax_gap = mean_predictor_value - comparators.global_value;
  report.fedavg_gap = global_objective(spec, result.final_global, data) - comparators.global_value;
  return report;
}

SlopeFit fit_slope(std::span<const double> horizons, std::span<const double> gaps) {
  if (horizons.size() != gaps.size())
    throw std::invalid_argument("fit_slope: horizons and gaps must have equal length");
  if (horizons.size() < 3) throw std::invalid_argument("fit_slope: need at least three points");
  const std::size_t n = horizons.size();
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(horizons[i] > 0.0)) throw std::invalid_argument("fit_slope: horizons must be positive");
    if (!(gaps[i] > 0.0)) throw std::invalid_argument("fit_slope: gaps must be positive");
    lx[i] = std::log(horizons[i]);
    ly[i] = std::log(gaps[i]);
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("fit_slope: horizons must not all coincide");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (syy > 0.0) {
    double ss_res = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = ly[i] - (fit.intercept + fit.slope * lx[i]);
      ss_res += e * e;
    }
    fit.r_squared = 1.0 - ss_res / syy;
  } else {
    fit.r_squared = 1.0;
  }
  return fit;
}

DeviationCheck check_deviation_bound(const RunTrace& trace, double gamma, std::int64_t local_iters) {
  if (local_iters < 1) throw std::invalid_argument("check_deviation_bound: local_iters must be >= 1");
  if (gamma < 0.0) throw std::invalid_argument("check_deviation_bound: gamma must be >= 0");
  DeviationCheck check;
  const double factor = 4.0 * gamma * gamma * static_cast<double>(local_iters) * static_cast<double>(local_iters);
  for (const RoundRecord& rec : trace.rounds) {
    const double bound = factor * rec.grad_norm_sq_max;
    if (bound > 0.0) {
      const double ratio = rec.deviation_sq / bound;
      if (ratio > check.worst_ratio) {
        check.worst_ratio = ratio;
        check.worst_round = rec.t;
      }
      if (rec.deviation_sq > bound * (1.0 + 1e-9)) check.passed = false;
    } else if (rec.deviation_sq > 0.0) {
      check.worst_ratio = std::numeric_limits<double>::infinity();
      check.worst_round = rec.t;
      check.passed = false;
    }
  }
  return check;
}

namespace {

// Variance of the subset-averaged scaled client gradient at a frozen point,
// estimated over `resamples` random distinct subsets of the given size.
double subset_gradient_variance(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                                const Vector& frozen, std::int64_t subset_size, std::int64_t resamples,
                                std::uint64_t seed) {
  const std::int64_t pool = data.clients();
  RngStream rng(mix_seed(seed, {rng_tag::kVarianceCheck, static_cast<std::uint64_t>(subset_size)}));
  std::vector<std::int64_t> ids(pool);
  Vector mean = Vector::Zero(spec.dim);
  double mean_sq = 0.0;
  Vector g(spec.dim);
  std::vector<std::int64_t> one_index(1);
  for (std::int64_t s = 0; s < resamples; ++s) {
    for (std::int64_t i = 0; i < pool; ++i) ids[i] = i + 1;
    for (std::int64_t k = 0; k < subset_size; ++k) {
      const std::int64_t j = k + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(pool - k)));
      std::swap(ids[k], ids[j]);
    }
    double weight_sum = 0.0;
    for (std::int64_t k = 0; k < subset_size; ++k) weight_sum += data.cell(1, ids[k]).weight;
    g.setZero();
    for (std::int64_t k = 0; k < subset_size; ++k) {
      const ClientBlockCell& cell = data.cell(1, ids[k]);
      one_index[0] = static_cast<std::int64_t>(rng.below(cell.samples.size()));
      const double scale = cell.weight / weight_sum * static_cast<double>(subset_size);
      g += scale * minibatch_gradient(spec, frozen, cell.samples, one_index);
    }
    g /= static_cast<double>(subset_size);
    mean += g;
    mean_sq += g.squaredNorm();
  }
  mean /= static_cast<double>(resamples);
  mean_sq /= static_cast<double>(resamples);
  return std::max(0.0, mean_sq - mean.squaredNorm());
}

}  // namespace

VarianceCheck check_variance_scaling(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                                     std::span<const std::int64_t> participant_counts,
                                     std::int64_t resamples, std::uint64_t seed) {
  if (resamples < 1000)
    throw std::invalid_argument("check_variance_scaling: need at least 1000 resamples");
  if (participant_counts.empty())
    throw std::invalid_argument("check_variance_scaling: no participant counts given");
  for (std::int64_t n : participant_counts)
    if (n < 1 || n > data.clients())
      throw std::invalid_argument("check_variance_scaling: participant count outside 1..clients");

  RngStream frozen_rng(mix_seed(seed, {rng_tag::kFrozenModel}));
  Vector frozen(spec.dim);
  for (Eigen::Index i = 0; i < frozen.size(); ++i) frozen[i] = frozen_rng.normal();
  const double norm = frozen.norm();
  if (norm > 0.0) frozen /= norm;

  const double var_one = subset_gradient_variance(spec, data, frozen, 1, resamples, seed);
  VarianceCheck check;
  for (std::int64_t n : participant_counts) {
    VarianceRow row;
    row.participants = n;
    row.variance = n == 1 ? var_one : subset_gradient_variance(spec, data, frozen, n, resamples, seed);
    row.bound = 1.5 * var_one / static_cast<double>(n);
    row.within_bound = row.variance <= row.bound;
    if (!row.within_bound) check.passed = false;
    check.rows.push_back(row);
  }
  return check;
}

double reduction_oracle_sequential(const ObjectiveSpec& spec, const FederatedCyclicDataset& data,
                                   const OptimizerConfig& config, const RunTrace& trace) {
  if (config.pool_size != 1 || config.participation_rate != 1.0 || !config.full_batch)
    throw std::invalid_argument(
        "reduction_oracle_sequential: requires a single fully participating client and full batches");
  if (data.clients() != 1) throw std::invalid_argument("reduction_oracle_sequential: dataset must have one client");
  Vector model = Vector::Zero(spec.dim);
  double worst = 0.0;
  for (const RoundRecord& rec : trace.rounds) {
    const std::span<const Sample> samples(data.cell(rec.block, 1).samples);
    for (std::int64_t s = 0; s < config.plan.local_iters; ++s) {
      Vector grad = minibatch_gradient(spec, model, samples);
      model.noalias() -= config.gamma * grad;
      if (spec.projection_radius) model = project_to_ball(std::move(model), *spec.projection_radius);
    }
    if (rec.global_model.size() != model.size())
      throw std::invalid_argument("reduction_oracle_sequential: trace lacks stored models");
    worst = std::max(worst, (model - rec.global_model).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace fedcyc
