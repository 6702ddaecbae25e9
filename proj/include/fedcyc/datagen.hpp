#pragma once

#include "fedcyc/objectives.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fedcyc {

enum class TaskKind { Regression, Logistic, Softmax };

/// Synthetic federated data over an M x N (block x client) grid. Each block
/// has its own ground-truth parameter; clients add within-block feature skew;
/// per-cell sample counts are Gaussian around total_samples/(M*N) with a
/// std of mean/5, truncated at 1.
struct DataGenConfig {
  std::int64_t clients = 1;      // N
  std::int64_t blocks = 1;       // M
  std::int64_t total_samples = 1;  // S
  Eigen::Index feature_dim = 1;  // d_f
  double block_heterogeneity = 0.01;
  double client_heterogeneity = 0.1;
  double noise_std = 0.5;
  double feature_scale = 1.0;
  double base_parameter_norm = 1.0;
  TaskKind task = TaskKind::Regression;
  int num_classes = 3;               // Softmax tasks only
  std::int64_t eval_per_block = 0;   // 0 derives max(1, S / (5 M))
  std::uint64_t seed = 0;

  Eigen::Index parameter_dim() const {
    return task == TaskKind::Softmax ? feature_dim * num_classes : feature_dim;
  }
  std::int64_t eval_count() const {
    return eval_per_block > 0 ? eval_per_block : std::max<std::int64_t>(1, total_samples / (5 * blocks));
  }
  void validate() const;  // throws std::invalid_argument
};

struct ClientBlockCell {
  std::int64_t block = 1;   // 1-based
  std::int64_t client = 1;  // 1-based
  std::vector<Sample> samples;
  double weight = 0.0;  // within-block share, proportional to sample count
};

class FederatedCyclicDataset {
 public:
  FederatedCyclicDataset() = default;
  FederatedCyclicDataset(DataGenConfig config, std::vector<ClientBlockCell> grid,
                         std::vector<std::vector<Sample>> eval_sets, std::vector<Vector> block_parameters,
                         bool shuffled);

  const DataGenConfig& config() const { return config_; }
  std::int64_t clients() const { return config_.clients; }
  std::int64_t blocks() const { return config_.blocks; }
  bool shuffled() const { return shuffled_; }

  const ClientBlockCell& cell(std::int64_t block, std::int64_t client) const;
  const std::vector<Sample>& eval_set(std::int64_t block) const;
  const Vector& block_parameter(std::int64_t block) const;

  /// Client groups of one block, weights summing to 1.
  std::vector<WeightedGroup> block_groups(std::int64_t block) const;
  /// All cells, weights p_i / M; feeds the pooled objective and optimum.
  std::vector<WeightedGroup> pooled_groups() const;

  std::int64_t total_training_samples() const;

 private:
  DataGenConfig config_;
  std::vector<ClientBlockCell> grid_;  // block-major
  std::vector<std::vector<Sample>> eval_sets_;
  std::vector<Vector> block_parameters_;
  bool shuffled_ = false;
};

FederatedCyclicDataset generate(const DataGenConfig& config);

/// Pools every training sample, shuffles, and deals the pool evenly back
/// across all M x N cells (eval sets likewise across blocks), producing an
/// i.i.d. dataset with the sample count conserved. Deterministic in the
/// dataset seed.
FederatedCyclicDataset shuffled_variant(const FederatedCyclicDataset& source);

struct ClientSizeRow {
  std::int64_t client = 0;
  std::int64_t block = 0;
  std::int64_t count = 0;
  double weight = 0.0;
};

std::vector<ClientSizeRow> client_size_report(const FederatedCyclicDataset& data);

/// Writes dataset.json (config echo, counts, block parameters) plus
/// samples.tsv; load_dataset() restores an identical dataset whose
/// re-serialization reproduces the files byte for byte.
void save_dataset(const FederatedCyclicDataset& data, const std::filesystem::path& dir);
FederatedCyclicDataset load_dataset(const std::filesystem::path& dir);

/// Weighted empirical objective of one block.
double block_objective(const ObjectiveSpec& spec, const Vector& model, const FederatedCyclicDataset& data,
                       std::int64_t block);
/// Mean of the M block objectives.
double global_objective(const ObjectiveSpec& spec, const Vector& model, const FederatedCyclicDataset& data);
/// Plain mean loss over a block's held-out samples.
double block_eval_loss(const ObjectiveSpec& spec, const Vector& model, const FederatedCyclicDataset& data,
                       std::int64_t block);

}  // namespace fedcyc
