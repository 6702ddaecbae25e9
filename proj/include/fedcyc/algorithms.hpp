#pragma once

#include "fedcyc/datagen.hpp"
#include "fedcyc/objectives.hpp"
#include "fedcyc/rng.hpp"
#include "fedcyc/schedule.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace fedcyc {

enum class Algorithm { FedAvg, MmPsgd, McPsgd };
enum class AveragingMode { Uniform, Ewa };

/// How much per-round bookkeeping a run records: None keeps only models and
/// deviation statistics, Eval adds held-out losses, Full adds the training-
/// objective losses that feed gap columns.
enum class TraceMetrics { None, Eval, Full };

struct OptimizerConfig {
  Algorithm algorithm = Algorithm::FedAvg;
  CyclePlan plan;
  double gamma = 0.01;              // mixed-chain learning rate
  std::optional<double> eta;        // separate-chain rate, mc-psgd only
  std::int64_t batch_size = 1;
  AveragingMode averaging = AveragingMode::Uniform;
  double ewa_base = 0.5;
  double participation_rate = 1.0;  // participants = round(rate * pool_size), min 1
  std::int64_t pool_size = 1;
  std::uint64_t master_seed = 0;
  bool full_batch = false;          // every local step uses the whole local set, no sampling
  TraceMetrics trace_metrics = TraceMetrics::Full;
  int threads = 1;

  std::int64_t participants_per_round() const;
  void validate() const;  // throws std::invalid_argument
};

/// Per-block predictors plus the number of updates each has absorbed.
/// Counts accumulate across cycles and never reset.
struct PredictorSet {
  std::vector<Vector> predictors;
  std::vector<std::int64_t> round_counts;
};

PredictorSet make_predictor_set(std::int64_t blocks, Eigen::Index dim);

/// Running average: pred <- r/(r+1) pred + 1/(r+1) model, r = updates so far.
void update_predictor_uniform(PredictorSet& set, std::int64_t block, const Vector& model);

/// Exponentially weighted: first update copies the model, afterwards
/// pred <- base * pred + (1 - base) * model.
void update_predictor_ewa(PredictorSet& set, std::int64_t block, const Vector& model, double base);

/// sqrt(N) / (L sqrt(T))
double theoretical_gamma(std::int64_t participants, std::int64_t total_iterations, double smoothness);
/// sqrt(N M) / (L sqrt(T))
double theoretical_eta(std::int64_t participants, std::int64_t blocks, std::int64_t total_iterations,
                       double smoothness);
/// Largest admissible local-iteration count for the theoretical schedules:
/// floor(T^{1/4} / N^{3/4}), with T replaced by T/M for mc-psgd; at least 1.
std::int64_t max_local_iterations(std::int64_t total_iterations, std::int64_t participants,
                                  std::int64_t blocks, Algorithm algorithm);

/// Entrywise mean, summed in index order.
Vector aggregate(std::span<const Vector> models);

struct LocalSgdOptions {
  double rate = 0.0;
  std::int64_t steps = 1;
  std::int64_t batch_size = 1;
  bool full_batch = false;
  double gradient_scale = 1.0;  // client objective scaling (weight * participants)
};

struct LocalSgdResult {
  Vector model;
  double max_grad_sq = 0.0;  // largest observed squared stochastic-gradient norm
};

/// Runs `steps` SGD steps on one client's local samples; batches are drawn
/// with replacement from `rng` unless full_batch is set.
LocalSgdResult local_sgd(const ObjectiveSpec& spec, Vector model, std::span<const Sample> data,
                         const LocalSgdOptions& opts, RngStream& rng);

struct TwinSgdResult {
  Vector mixed, separate;
  double max_grad_sq = 0.0;
};

/// Advances the mixed and separate chains together; each step draws one batch
/// and applies it to both models at their own rates.
TwinSgdResult local_sgd_two_chains(const ObjectiveSpec& spec, Vector mixed, Vector separate,
                                   std::span<const Sample> data, double rate_mixed, double rate_separate,
                                   std::int64_t steps, std::int64_t batch_size, bool full_batch,
                                   double gradient_scale, RngStream& rng);

struct InterimChoice {
  const Vector* model = nullptr;
  bool separate = false;
};

/// Picks the aggregate with smaller mean reported local loss; ties keep the
/// mixed model.
InterimChoice select_interim(const Vector& mixed, const Vector& separate,
                             std::span<const double> mixed_losses, std::span<const double> separate_losses);

/// Uniform subset of client ids (1-based) of size round(rate * pool_size),
/// at least 1, sorted ascending.
std::vector<std::int64_t> sample_participants(std::int64_t pool_size, double rate, RngStream& rng);

struct RoundRecord {
  std::int64_t t = 0;  // communication iteration
  std::int64_t cycle = 0, block = 0, round_in_block = 0;
  double global_loss = 0.0;                     // training objective of the global model (Full)
  std::vector<double> predictor_block_losses;   // per-block training losses of the predictors (Full)
  double global_eval_loss = 0.0;                // block-averaged held-out loss of the global model (Eval/Full)
  double predictor_eval_loss = 0.0;             // block-averaged held-out loss of the predictors (Eval/Full)
  int selected_chain = -1;                      // mc-psgd: 0 mixed, 1 separate
  double mixed_local_loss = 0.0;                // mc-psgd: mean reported local loss of the mixed aggregate
  double separate_local_loss = 0.0;
  double deviation_sq = 0.0;                    // max over participants ||x_bar - x_i||^2 at aggregation
  double grad_norm_sq_max = 0.0;                // running max squared stochastic-gradient norm
  Vector global_model;                          // mixed-chain aggregate after this round
  Vector separate_model;                        // mc-psgd separate aggregate (empty otherwise)
};

struct RunTrace {
  std::vector<RoundRecord> rounds;
};

struct RunResult {
  PredictorSet predictors;
  Vector final_global;
  RunTrace trace;
};

RunResult run_fedavg(const OptimizerConfig& config, const FederatedCyclicDataset& data,
                     const ObjectiveSpec& spec);
RunResult run_mm_psgd(const OptimizerConfig& config, const FederatedCyclicDataset& data,
                      const ObjectiveSpec& spec);
RunResult run_mc_psgd(const OptimizerConfig& config, const FederatedCyclicDataset& data,
                      const ObjectiveSpec& spec);

}  // namespace fedcyc
