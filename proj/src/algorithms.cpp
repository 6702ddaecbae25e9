#include "fedcyc/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>

namespace fedcyc {

std::int64_t OptimizerConfig::participants_per_round() const {
  return std::max<std::int64_t>(1, std::llround(participation_rate * static_cast<double>(pool_size)));
}

void OptimizerConfig::validate() const {
  plan.validate();
  if (!(gamma > 0.0)) throw std::invalid_argument("OptimizerConfig: gamma must be > 0");
  if (algorithm == Algorithm::McPsgd) {
    if (!eta) throw std::invalid_argument("OptimizerConfig: mc-psgd requires eta");
    if (!(*eta > 0.0)) throw std::invalid_argument("OptimizerConfig: eta must be > 0");
  } else if (eta) {
    throw std::invalid_argument("OptimizerConfig: eta is only meaningful for mc-psgd");
  }
  if (!full_batch && batch_size < 1) throw std::invalid_argument("OptimizerConfig: batch_size must be >= 1");
  if (!(participation_rate > 0.0) || participation_rate > 1.0)
    throw std::invalid_argument("OptimizerConfig: participation_rate must be in (0, 1]");
  if (pool_size < 1) throw std::invalid_argument("OptimizerConfig: pool_size must be >= 1");
  if (participation_rate * static_cast<double>(pool_size) < 1.0 - 1e-12)
    throw std::invalid_argument("OptimizerConfig: participation_rate * pool_size must be >= 1");
  if (averaging == AveragingMode::Ewa && (!(ewa_base > 0.0) || !(ewa_base < 1.0)))
    throw std::invalid_argument("OptimizerConfig: ewa_base must be in (0, 1)");
  if (threads < 1) throw std::invalid_argument("OptimizerConfig: threads must be >= 1");
}

PredictorSet make_predictor_set(std::int64_t blocks, Eigen::Index dim) {
  PredictorSet set;
  set.predictors.assign(blocks, Vector::Zero(dim));
  set.round_counts.assign(blocks, 0);
  return set;
}

void update_predictor_uniform(PredictorSet& set, std::int64_t block, const Vector& model) {
  if (block < 1 || block > static_cast<std::int64_t>(set.predictors.size()))
    throw std::out_of_range("update_predictor_uniform: block outside 1..M");
  const double r = static_cast<double>(set.round_counts[block - 1]);
  Vector& pred = set.predictors[block - 1];
  pred = (r / (r + 1.0)) * pred + (1.0 / (r + 1.0)) * model;
  ++set.round_counts[block - 1];
}

void update_predictor_ewa(PredictorSet& set, std::int64_t block, const Vector& model, double base) {
  if (block < 1 || block > static_cast<std::int64_t>(set.predictors.size()))
    throw std::out_of_range("update_predictor_ewa: block outside 1..M");
  if (!(base > 0.0) || !(base < 1.0)) throw std::invalid_argument("update_predictor_ewa: base must be in (0, 1)");
  Vector& pred = set.predictors[block - 1];
  if (set.round_counts[block - 1] == 0)
    pred = model;
  else
    pred = base * pred + (1.0 - base) * model;
  ++set.round_counts[block - 1];
}

double theoretical_gamma(std::int64_t participants, std::int64_t total_iterations, double smoothness) {
  if (participants < 1 || total_iterations < 1)
    throw std::invalid_argument("theoretical_gamma: participants and total_iterations must be >= 1");
  if (!(smoothness > 0.0)) throw std::invalid_argument("theoretical_gamma: smoothness must be > 0");
  return std::sqrt(static_cast<double>(participants)) /
         (smoothness * std::sqrt(static_cast<double>(total_iterations)));
}

double theoretical_eta(std::int64_t participants, std::int64_t blocks, std::int64_t total_iterations,
                       double smoothness) {
  if (blocks < 1) throw std::invalid_argument("theoretical_eta: blocks must be >= 1");
  return theoretical_gamma(participants, total_iterations, smoothness) *
         std::sqrt(static_cast<double>(blocks));
}

std::int64_t max_local_iterations(std::int64_t total_iterations, std::int64_t participants,
                                  std::int64_t blocks, Algorithm algorithm) {
  if (total_iterations < 1 || participants < 1 || blocks < 1)
    throw std::invalid_argument("max_local_iterations: arguments must be >= 1");
  const double horizon = algorithm == Algorithm::McPsgd
                             ? static_cast<double>(total_iterations) / static_cast<double>(blocks)
                             : static_cast<double>(total_iterations);
  const double cap = std::pow(horizon, 0.25) / std::pow(static_cast<double>(participants), 0.75);
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(cap + 1e-9)));
}

Vector aggregate(std::span<const Vector> models) {
  if (models.empty()) throw std::invalid_argument("aggregate: no models");
  Vector sum = models[0];
  for (std::size_t i = 1; i < models.size(); ++i) {
    if (models[i].size() != sum.size()) throw std::invalid_argument("aggregate: dimension mismatch");
    sum += models[i];
  }
  sum /= static_cast<double>(models.size());
  if (!sum.allFinite()) throw std::runtime_error("aggregate: non-finite aggregate model");
  return sum;
}

namespace {

void step_batch(const ObjectiveSpec& spec, std::span<const Sample> data, std::int64_t batch_size,
                bool full_batch, RngStream& rng, std::vector<std::int64_t>& scratch, Vector& grad,
                const Vector& at) {
  if (full_batch) {
    grad = minibatch_gradient(spec, at, data);
    return;
  }
  scratch.clear();
  for (std::int64_t b = 0; b < batch_size; ++b)
    scratch.push_back(static_cast<std::int64_t>(rng.below(data.size())));
  grad = minibatch_gradient(spec, at, data, scratch);
}

void maybe_project(const ObjectiveSpec& spec, Vector& x) {
  if (spec.projection_radius) x = project_to_ball(std::move(x), *spec.projection_radius);
}

}  // namespace

LocalSgdResult local_sgd(const ObjectiveSpec& spec, Vector model, std::span<const Sample> data,
                         const LocalSgdOptions& opts, RngStream& rng) {
  if (data.empty()) throw std::invalid_argument("local_sgd: client has no samples");
  if (opts.steps < 0) throw std::invalid_argument("local_sgd: steps must be >= 0");
  if (!opts.full_batch && opts.batch_size < 1)
    throw std::invalid_argument("local_sgd: batch_size must be >= 1");
  LocalSgdResult out;
  std::vector<std::int64_t> scratch;
  Vector grad(model.size());
  for (std::int64_t s = 0; s < opts.steps; ++s) {
    step_batch(spec, data, opts.batch_size, opts.full_batch, rng, scratch, grad, model);
    grad *= opts.gradient_scale;
    out.max_grad_sq = std::max(out.max_grad_sq, grad.squaredNorm());
    model.noalias() -= opts.rate * grad;
    maybe_project(spec, model);
  }
  out.model = std::move(model);
  return out;
}

TwinSgdResult local_sgd_two_chains(const ObjectiveSpec& spec, Vector mixed, Vector separate,
                                   std::span<const Sample> data, double rate_mixed, double rate_separate,
                                   std::int64_t steps, std::int64_t batch_size, bool full_batch,
                                   double gradient_scale, RngStream& rng) {
  if (data.empty()) throw std::invalid_argument("local_sgd_two_chains: client has no samples");
  if (!full_batch && batch_size < 1)
    throw std::invalid_argument("local_sgd_two_chains: batch_size must be >= 1");
  TwinSgdResult out;
  std::vector<std::int64_t> scratch;
  Vector grad(mixed.size());
  for (std::int64_t s = 0; s < steps; ++s) {
    if (full_batch) {
      grad = minibatch_gradient(spec, mixed, data);
    } else {
      scratch.clear();
      for (std::int64_t b = 0; b < batch_size; ++b)
        scratch.push_back(static_cast<std::int64_t>(rng.below(data.size())));
      grad = minibatch_gradient(spec, mixed, data, scratch);
    }
    grad *= gradient_scale;
    out.max_grad_sq = std::max(out.max_grad_sq, grad.squaredNorm());
    mixed.noalias() -= rate_mixed * grad;
    maybe_project(spec, mixed);

    Vector grad_sep = full_batch ? minibatch_gradient(spec, separate, data)
                                 : minibatch_gradient(spec, separate, data, scratch);
    grad_sep *= gradient_scale;
    out.max_grad_sq = std::max(out.max_grad_sq, grad_sep.squaredNorm());
    separate.noalias() -= rate_separate * grad_sep;
    maybe_project(spec, separate);
  }
  out.mixed = std::move(mixed);
  out.separate = std::move(separate);
  return out;
}

InterimChoice select_interim(const Vector& mixed, const Vector& separate,
                             std::span<const double> mixed_losses, std::span<const double> separate_losses) {
  if (mixed_losses.empty() || mixed_losses.size() != separate_losses.size())
    throw std::invalid_argument("select_interim: loss lists must be non-empty and equally sized");
  double mx = 0.0, sx = 0.0;
  for (double v : mixed_losses) mx += v;
  for (double v : separate_losses) sx += v;
  mx /= static_cast<double>(mixed_losses.size());
  sx /= static_cast<double>(separate_losses.size());
  if (sx < mx) return {&separate, true};
  return {&mixed, false};
}

std::vector<std::int64_t> sample_participants(std::int64_t pool_size, double rate, RngStream& rng) {
  if (pool_size < 1) throw std::invalid_argument("sample_participants: pool_size must be >= 1");
  if (!(rate > 0.0) || rate > 1.0) throw std::invalid_argument("sample_participants: rate must be in (0, 1]");
  const std::int64_t n = std::max<std::int64_t>(1, std::llround(rate * static_cast<double>(pool_size)));
  std::vector<std::int64_t> ids(pool_size);
  for (std::int64_t i = 0; i < pool_size; ++i) ids[i] = i + 1;
  for (std::int64_t k = 0; k < n; ++k) {
    const std::int64_t j = k + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(pool_size - k)));
    std::swap(ids[k], ids[j]);
  }
  ids.resize(n);
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t)>& body) {
  if (threads <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  const int workers = static_cast<int>(std::min<std::int64_t>(threads, n));
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::int64_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

double block_avg_eval_loss(const ObjectiveSpec& spec, const Vector& model, const FederatedCyclicDataset& data) {
  double acc = 0.0;
  for (std::int64_t m = 1; m <= data.blocks(); ++m) acc += block_eval_loss(spec, model, data, m);
  return acc / static_cast<double>(data.blocks());
}

double predictors_block_avg_eval_loss(const ObjectiveSpec& spec, const PredictorSet& preds,
                                      const FederatedCyclicDataset& data) {
  double acc = 0.0;
  for (std::int64_t m = 1; m <= data.blocks(); ++m)
    acc += block_eval_loss(spec, preds.predictors[m - 1], data, m);
  return acc / static_cast<double>(data.blocks());
}

RunResult run_training(const OptimizerConfig& cfg, const FederatedCyclicDataset& data,
                       const ObjectiveSpec& spec) {
  cfg.plan.validate();
  spec.validate();
  if (cfg.pool_size != data.clients())
    throw std::invalid_argument("run: pool_size must equal the dataset's client count");
  if (cfg.plan.blocks != data.blocks())
    throw std::invalid_argument("run: plan.blocks must equal the dataset's block count");
  if (spec.feature_dim() != data.config().feature_dim)
    throw std::invalid_argument("run: objective feature dimension does not match the dataset");
  if (!cfg.full_batch && cfg.batch_size < 1) throw std::invalid_argument("run: batch_size must be >= 1");
  const bool mc = cfg.algorithm == Algorithm::McPsgd;
  if (mc && !cfg.eta) throw std::invalid_argument("run: mc-psgd requires eta");

  const CyclePlan& plan = cfg.plan;
  const std::int64_t total_iters = plan.total_iterations();
  const std::int64_t local_iters = plan.local_iters;
  const std::int64_t rounds = total_iters / local_iters;
  const std::int64_t n_blocks = plan.blocks;
  const std::int64_t n_part = cfg.participants_per_round();
  const double eta = mc ? *cfg.eta : 0.0;

  Vector xbar = Vector::Zero(spec.dim);
  Vector ybar = Vector::Zero(spec.dim);
  Vector ybroadcast = Vector::Zero(spec.dim);
  std::vector<Vector> wbar(n_blocks, Vector::Zero(spec.dim));
  PredictorSet preds = make_predictor_set(n_blocks, spec.dim);

  RunResult out;
  out.trace.rounds.reserve(rounds);

  std::vector<Vector> local_x(n_part), local_y(mc ? n_part : 0);
  std::vector<double> grad_max(n_part, 0.0), scales(n_part, 0.0);
  std::vector<double> loss_x(mc ? n_part : 0), loss_y(mc ? n_part : 0);
  double ghat_sq = 0.0;

  for (std::int64_t r = 1; r <= rounds; ++r) {
    const std::int64_t t = r * local_iters;
    const ScheduleCoordinate coord = coordinate_of(t, plan);
    const std::int64_t m = coord.block;

    RngStream prng(mix_seed(cfg.master_seed, {rng_tag::kParticipants, static_cast<std::uint64_t>(r)}));
    const std::vector<std::int64_t> participants = sample_participants(cfg.pool_size, cfg.participation_rate, prng);

    double weight_sum = 0.0;
    for (std::int64_t id : participants) weight_sum += data.cell(m, id).weight;
    for (std::size_t j = 0; j < participants.size(); ++j)
      scales[j] = data.cell(m, participants[j]).weight / weight_sum * static_cast<double>(n_part);

    parallel_for(static_cast<std::int64_t>(participants.size()), cfg.threads, [&](std::int64_t j) {
      const std::int64_t id = participants[j];
      RngStream rng(mix_seed(cfg.master_seed,
                             {rng_tag::kLocalSgd, static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(id)}));
      const std::span<const Sample> samples(data.cell(m, id).samples);
      if (mc) {
        TwinSgdResult res = local_sgd_two_chains(spec, xbar, ybroadcast, samples, cfg.gamma, eta, local_iters,
                                                 cfg.batch_size, cfg.full_batch, scales[j], rng);
        local_x[j] = std::move(res.mixed);
        local_y[j] = std::move(res.separate);
        grad_max[j] = res.max_grad_sq;
      } else {
        LocalSgdOptions opts{cfg.gamma, local_iters, cfg.batch_size, cfg.full_batch, scales[j]};
        LocalSgdResult res = local_sgd(spec, xbar, samples, opts, rng);
        local_x[j] = std::move(res.model);
        grad_max[j] = res.max_grad_sq;
      }
    });

    xbar = aggregate(local_x);
    for (double g : grad_max) ghat_sq = std::max(ghat_sq, g);
    double dev_sq = 0.0;
    for (const Vector& xi : local_x) dev_sq = std::max(dev_sq, (xbar - xi).squaredNorm());

    RoundRecord rec;
    rec.t = t;
    rec.cycle = coord.cycle;
    rec.block = m;
    rec.round_in_block = (coord.iter_in_block - 1) / local_iters + 1;
    rec.deviation_sq = dev_sq;
    rec.grad_norm_sq_max = ghat_sq;

    if (mc) {
      ybar = aggregate(local_y);
      wbar[m - 1] = ybar;
      for (std::size_t j = 0; j < participants.size(); ++j) {
        const auto& samples = data.cell(m, participants[j]).samples;
        loss_x[j] = scales[j] * group_mean_loss(spec, xbar, samples);
        loss_y[j] = scales[j] * group_mean_loss(spec, ybar, samples);
      }
      const InterimChoice choice = select_interim(xbar, ybar, loss_x, loss_y);
      if (cfg.averaging == AveragingMode::Uniform)
        update_predictor_uniform(preds, m, *choice.model);
      else
        update_predictor_ewa(preds, m, *choice.model, cfg.ewa_base);
      rec.selected_chain = choice.separate ? 1 : 0;
      double mx = 0.0, sx = 0.0;
      for (std::size_t j = 0; j < participants.size(); ++j) {
        mx += loss_x[j];
        sx += loss_y[j];
      }
      rec.mixed_local_loss = mx / static_cast<double>(participants.size());
      rec.separate_local_loss = sx / static_cast<double>(participants.size());
      if (t < total_iters && next_round_new_block(t, plan))
        ybroadcast = wbar[coordinate_of(t + 1, plan).block - 1];
      else
        ybroadcast = ybar;
      rec.separate_model = ybar;
    } else if (cfg.algorithm == Algorithm::MmPsgd) {
      if (cfg.averaging == AveragingMode::Uniform)
        update_predictor_uniform(preds, m, xbar);
      else
        update_predictor_ewa(preds, m, xbar, cfg.ewa_base);
    }

    if (cfg.trace_metrics == TraceMetrics::Full) {
      rec.global_loss = global_objective(spec, xbar, data);
      rec.predictor_block_losses.resize(n_blocks);
      for (std::int64_t b = 1; b <= n_blocks; ++b) {
        const Vector& model = cfg.algorithm == Algorithm::FedAvg ? xbar : preds.predictors[b - 1];
        rec.predictor_block_losses[b - 1] = block_objective(spec, model, data, b);
      }
    }
    if (cfg.trace_metrics != TraceMetrics::None) {
      rec.global_eval_loss = block_avg_eval_loss(spec, xbar, data);
      rec.predictor_eval_loss = cfg.algorithm == Algorithm::FedAvg
                                    ? rec.global_eval_loss
                                    : predictors_block_avg_eval_loss(spec, preds, data);
    }
    rec.global_model = xbar;
    out.trace.rounds.push_back(std::move(rec));
  }

  if (cfg.algorithm == Algorithm::FedAvg) {
    for (std::int64_t b = 0; b < n_blocks; ++b) {
      preds.predictors[b] = xbar;
      preds.round_counts[b] = plan.cycles * plan.rounds_per_block;
    }
  }
  out.predictors = std::move(preds);
  out.final_global = xbar;
  return out;
}

}  // namespace

RunResult run_fedavg(const OptimizerConfig& config, const FederatedCyclicDataset& data,
                     const ObjectiveSpec& spec) {
  if (config.algorithm != Algorithm::FedAvg) throw std::invalid_argument("run_fedavg: config.algorithm mismatch");
  return run_training(config, data, spec);
}

RunResult run_mm_psgd(const OptimizerConfig& config, const FederatedCyclicDataset& data,
                      const ObjectiveSpec& spec) {
  if (config.algorithm != Algorithm::MmPsgd) throw std::invalid_argument("run_mm_psgd: config.algorithm mismatch");
  return run_training(config, data, spec);
}

RunResult run_mc_psgd(const OptimizerConfig& config, const FederatedCyclicDataset& data,
                      const ObjectiveSpec& spec) {
  if (config.algorithm != Algorithm::McPsgd) throw std::invalid_argument("run_mc_psgd: config.algorithm mismatch");
  return run_training(config, data, spec);
}

}  // namespace fedcyc
