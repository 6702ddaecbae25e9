#include "fedcyc/datagen.hpp"

#include "fedcyc/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace fedcyc {
namespace {

constexpr int kAnchorCount = 10;

std::uint64_t fnv1a(std::uint64_t h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Hashes vector contents with -0.0 folded into +0.0, so two identical
// distributions produce identical stream keys.
std::uint64_t hash_values(std::uint64_t h, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    double x = v[i] == 0.0 ? 0.0 : v[i];
    h = fnv1a(h, &x, sizeof(x));
  }
  return h;
}

Vector unit_direction(RngStream& rng, Eigen::Index n) {
  Vector v(n);
  double norm = 0.0;
  do {
    for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
    norm = v.norm();
  } while (norm < 1e-12);
  return v / norm;
}

double draw_target(const DataGenConfig& cfg, const Vector& features, const Vector& theta, RngStream& rng) {
  switch (cfg.task) {
    case TaskKind::Regression:
      return features.dot(theta) + cfg.noise_std * rng.normal();
    case TaskKind::Logistic: {
      const double logit = features.dot(theta);
      const double p = 1.0 / (1.0 + std::exp(-logit));
      return rng.uniform01() < p ? 1.0 : -1.0;
    }
    case TaskKind::Softmax: {
      const Eigen::Index df = cfg.feature_dim;
      Eigen::VectorXd logits(cfg.num_classes);
      for (int c = 0; c < cfg.num_classes; ++c) logits[c] = features.dot(theta.segment(c * df, df));
      logits.array() -= logits.maxCoeff();
      Eigen::VectorXd probs = logits.array().exp();
      probs /= probs.sum();
      const double u = rng.uniform01();
      double acc = 0.0;
      for (int c = 0; c < cfg.num_classes; ++c) {
        acc += probs[c];
        if (u < acc) return static_cast<double>(c);
      }
      return static_cast<double>(cfg.num_classes - 1);
    }
  }
  throw std::logic_error("datagen: unknown task kind");
}

Sample draw_sample(const DataGenConfig& cfg, const Vector& shift, const Vector& theta, RngStream& rng) {
  Sample s;
  s.features.resize(cfg.feature_dim);
  for (Eigen::Index j = 0; j < cfg.feature_dim; ++j) s.features[j] = shift[j] + rng.normal();
  s.features *= cfg.feature_scale;
  s.target = draw_target(cfg, s.features, theta, rng);
  return s;
}

void assign_block_weights(std::vector<ClientBlockCell>& grid, std::int64_t blocks, std::int64_t clients) {
  for (std::int64_t m = 0; m < blocks; ++m) {
    double total = 0.0;
    for (std::int64_t i = 0; i < clients; ++i) total += static_cast<double>(grid[m * clients + i].samples.size());
    for (std::int64_t i = 0; i < clients; ++i)
      grid[m * clients + i].weight = static_cast<double>(grid[m * clients + i].samples.size()) / total;
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void DataGenConfig::validate() const {
  if (clients < 1) throw std::invalid_argument("DataGenConfig: clients must be >= 1");
  if (blocks < 1) throw std::invalid_argument("DataGenConfig: blocks must be >= 1");
  if (total_samples < 1) throw std::invalid_argument("DataGenConfig: total_samples must be >= 1");
  if (feature_dim < 1) throw std::invalid_argument("DataGenConfig: feature_dim must be >= 1");
  if (block_heterogeneity < 0.0 || client_heterogeneity < 0.0)
    throw std::invalid_argument("DataGenConfig: heterogeneity knobs must be >= 0");
  if (noise_std < 0.0) throw std::invalid_argument("DataGenConfig: noise_std must be >= 0");
  if (!(feature_scale > 0.0)) throw std::invalid_argument("DataGenConfig: feature_scale must be > 0");
  if (base_parameter_norm < 0.0) throw std::invalid_argument("DataGenConfig: base_parameter_norm must be >= 0");
  if (task == TaskKind::Softmax && num_classes < 2)
    throw std::invalid_argument("DataGenConfig: softmax task needs num_classes >= 2");
  if (eval_per_block < 0) throw std::invalid_argument("DataGenConfig: eval_per_block must be >= 0");
}

FederatedCyclicDataset::FederatedCyclicDataset(DataGenConfig config, std::vector<ClientBlockCell> grid,
                                               std::vector<std::vector<Sample>> eval_sets,
                                               std::vector<Vector> block_parameters, bool shuffled)
    : config_(std::move(config)),
      grid_(std::move(grid)),
      eval_sets_(std::move(eval_sets)),
      block_parameters_(std::move(block_parameters)),
      shuffled_(shuffled) {}

const ClientBlockCell& FederatedCyclicDataset::cell(std::int64_t block, std::int64_t client) const {
  if (block < 1 || block > config_.blocks || client < 1 || client > config_.clients)
    throw std::out_of_range("FederatedCyclicDataset::cell: index outside grid");
  return grid_[(block - 1) * config_.clients + (client - 1)];
}

const std::vector<Sample>& FederatedCyclicDataset::eval_set(std::int64_t block) const {
  if (block < 1 || block > config_.blocks) throw std::out_of_range("eval_set: block outside 1..M");
  return eval_sets_[block - 1];
}

const Vector& FederatedCyclicDataset::block_parameter(std::int64_t block) const {
  if (block < 1 || block > config_.blocks) throw std::out_of_range("block_parameter: block outside 1..M");
  return block_parameters_[block - 1];
}

std::vector<WeightedGroup> FederatedCyclicDataset::block_groups(std::int64_t block) const {
  if (block < 1 || block > config_.blocks) throw std::out_of_range("block_groups: block outside 1..M");
  std::vector<WeightedGroup> groups;
  groups.reserve(config_.clients);
  for (std::int64_t i = 1; i <= config_.clients; ++i) {
    const ClientBlockCell& c = cell(block, i);
    groups.push_back({std::span<const Sample>(c.samples), c.weight});
  }
  return groups;
}

std::vector<WeightedGroup> FederatedCyclicDataset::pooled_groups() const {
  std::vector<WeightedGroup> groups;
  groups.reserve(grid_.size());
  const double inv_m = 1.0 / static_cast<double>(config_.blocks);
  for (const ClientBlockCell& c : grid_)
    groups.push_back({std::span<const Sample>(c.samples), c.weight * inv_m});
  return groups;
}

std::int64_t FederatedCyclicDataset::total_training_samples() const {
  std::int64_t n = 0;
  for (const ClientBlockCell& c : grid_) n += static_cast<std::int64_t>(c.samples.size());
  return n;
}

FederatedCyclicDataset generate(const DataGenConfig& cfg) {
  cfg.validate();
  const std::int64_t n_clients = cfg.clients, n_blocks = cfg.blocks;
  const Eigen::Index d_theta = cfg.parameter_dim();

  RngStream anchors(mix_seed(cfg.seed, {rng_tag::kDatagenAnchors}));
  const Vector theta0 = cfg.base_parameter_norm * unit_direction(anchors, d_theta);
  std::vector<Vector> psi(kAnchorCount), phi(kAnchorCount);
  for (auto& v : psi) v = unit_direction(anchors, d_theta);
  for (auto& v : phi) v = unit_direction(anchors, cfg.feature_dim);

  // Block parameters average a contiguous anchor chunk (adjacent chunks share
  // one anchor), so blocks overlap partially and grow more extreme as the
  // chunks shrink.
  std::vector<Vector> theta(n_blocks), rho(n_blocks);
  for (std::int64_t m = 0; m < n_blocks; ++m) {
    const std::int64_t lo = m * kAnchorCount / n_blocks;
    std::int64_t hi = std::max(lo + 1, (m + 1) * kAnchorCount / n_blocks);
    if (n_blocks > 1) hi = std::min<std::int64_t>(hi + 1, kAnchorCount);
    Vector mean_psi = Vector::Zero(d_theta);
    Vector mean_phi = Vector::Zero(cfg.feature_dim);
    for (std::int64_t j = lo; j < hi; ++j) {
      mean_psi += psi[j];
      mean_phi += phi[j];
    }
    mean_psi /= static_cast<double>(hi - lo);
    mean_phi /= static_cast<double>(hi - lo);
    theta[m] = theta0 + cfg.block_heterogeneity * mean_psi;
    rho[m] = mean_phi;
  }

  // Per-cell feature shifts: block component plus client skew.
  std::vector<Vector> shifts(n_blocks * n_clients);
  for (std::int64_t m = 0; m < n_blocks; ++m)
    for (std::int64_t i = 0; i < n_clients; ++i) {
      const Vector nu = unit_direction(anchors, cfg.feature_dim);
      shifts[m * n_clients + i] = cfg.block_heterogeneity * rho[m] + cfg.client_heterogeneity * nu;
    }

  // Cell streams are keyed on the client index and the cell's distribution
  // parameters, so cells with identical distributions hold identical draws.
  const double mean_count = static_cast<double>(cfg.total_samples) / static_cast<double>(n_blocks * n_clients);
  const double sd_count = mean_count / 5.0;
  std::vector<ClientBlockCell> grid(n_blocks * n_clients);
  for (std::int64_t m = 0; m < n_blocks; ++m)
    for (std::int64_t i = 0; i < n_clients; ++i) {
      ClientBlockCell& cell = grid[m * n_clients + i];
      cell.block = m + 1;
      cell.client = i + 1;
      std::uint64_t key = hash_values(0xcbf29ce484222325ULL, theta[m]);
      key = hash_values(key, shifts[m * n_clients + i]);
      RngStream rng(mix_seed(cfg.seed, {rng_tag::kDatagenCell, static_cast<std::uint64_t>(i + 1), key}));
      const std::int64_t count =
          std::max<std::int64_t>(1, std::llround(mean_count + sd_count * rng.normal()));
      cell.samples.reserve(count);
      for (std::int64_t k = 0; k < count; ++k)
        cell.samples.push_back(draw_sample(cfg, shifts[m * n_clients + i], theta[m], rng));
    }
  assign_block_weights(grid, n_blocks, n_clients);

  // Held-out per-block sets drawn from the uniform client mixture.
  const std::int64_t n_eval = cfg.eval_count();
  std::vector<std::vector<Sample>> eval_sets(n_blocks);
  for (std::int64_t m = 0; m < n_blocks; ++m) {
    std::uint64_t key = hash_values(0xcbf29ce484222325ULL, theta[m]);
    for (std::int64_t i = 0; i < n_clients; ++i) key = hash_values(key, shifts[m * n_clients + i]);
    RngStream rng(mix_seed(cfg.seed, {rng_tag::kDatagenEval, key}));
    eval_sets[m].reserve(n_eval);
    for (std::int64_t k = 0; k < n_eval; ++k) {
      const std::int64_t j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n_clients)));
      eval_sets[m].push_back(draw_sample(cfg, shifts[m * n_clients + j], theta[m], rng));
    }
  }

  return FederatedCyclicDataset(cfg, std::move(grid), std::move(eval_sets), std::move(theta), false);
}

FederatedCyclicDataset shuffled_variant(const FederatedCyclicDataset& source) {
  const DataGenConfig& cfg = source.config();
  RngStream rng(mix_seed(cfg.seed, {rng_tag::kShuffle}));

  std::vector<Sample> pool;
  pool.reserve(source.total_training_samples());
  for (std::int64_t m = 1; m <= cfg.blocks; ++m)
    for (std::int64_t i = 1; i <= cfg.clients; ++i) {
      const auto& s = source.cell(m, i).samples;
      pool.insert(pool.end(), s.begin(), s.end());
    }
  for (std::size_t k = pool.size(); k > 1; --k)
    std::swap(pool[k - 1], pool[rng.below(k)]);

  const std::int64_t cells = cfg.blocks * cfg.clients;
  const std::int64_t base = static_cast<std::int64_t>(pool.size()) / cells;
  const std::int64_t rem = static_cast<std::int64_t>(pool.size()) % cells;
  std::vector<ClientBlockCell> grid(cells);
  std::size_t cursor = 0;
  for (std::int64_t m = 0; m < cfg.blocks; ++m)
    for (std::int64_t i = 0; i < cfg.clients; ++i) {
      ClientBlockCell& cell = grid[m * cfg.clients + i];
      cell.block = m + 1;
      cell.client = i + 1;
      const std::int64_t take = base + (m * cfg.clients + i < rem ? 1 : 0);
      cell.samples.assign(pool.begin() + cursor, pool.begin() + cursor + take);
      cursor += take;
    }
  assign_block_weights(grid, cfg.blocks, cfg.clients);

  std::vector<Sample> eval_pool;
  for (std::int64_t m = 1; m <= cfg.blocks; ++m) {
    const auto& e = source.eval_set(m);
    eval_pool.insert(eval_pool.end(), e.begin(), e.end());
  }
  for (std::size_t k = eval_pool.size(); k > 1; --k)
    std::swap(eval_pool[k - 1], eval_pool[rng.below(k)]);
  std::vector<std::vector<Sample>> eval_sets(cfg.blocks);
  const std::int64_t ebase = static_cast<std::int64_t>(eval_pool.size()) / cfg.blocks;
  const std::int64_t erem = static_cast<std::int64_t>(eval_pool.size()) % cfg.blocks;
  cursor = 0;
  for (std::int64_t m = 0; m < cfg.blocks; ++m) {
    const std::int64_t take = ebase + (m < erem ? 1 : 0);
    eval_sets[m].assign(eval_pool.begin() + cursor, eval_pool.begin() + cursor + take);
    cursor += take;
  }

  std::vector<Vector> params;
  for (std::int64_t m = 1; m <= cfg.blocks; ++m) params.push_back(source.block_parameter(m));
  return FederatedCyclicDataset(cfg, std::move(grid), std::move(eval_sets), std::move(params), true);
}

std::vector<ClientSizeRow> client_size_report(const FederatedCyclicDataset& data) {
  std::vector<ClientSizeRow> rows;
  rows.reserve(data.blocks() * data.clients());
  for (std::int64_t m = 1; m <= data.blocks(); ++m)
    for (std::int64_t i = 1; i <= data.clients(); ++i) {
      const ClientBlockCell& c = data.cell(m, i);
      rows.push_back({i, m, static_cast<std::int64_t>(c.samples.size()), c.weight});
    }
  return rows;
}

namespace {

nlohmann::json config_to_json(const DataGenConfig& cfg) {
  nlohmann::json j;
  j["N"] = cfg.clients;
  j["M"] = cfg.blocks;
  j["total_samples"] = cfg.total_samples;
  j["d_f"] = cfg.feature_dim;
  j["block_heterogeneity"] = cfg.block_heterogeneity;
  j["client_heterogeneity"] = cfg.client_heterogeneity;
  j["noise_std"] = cfg.noise_std;
  j["feature_scale"] = cfg.feature_scale;
  j["base_parameter_norm"] = cfg.base_parameter_norm;
  j["task"] = cfg.task == TaskKind::Regression ? "regression"
              : cfg.task == TaskKind::Logistic ? "logistic"
                                               : "softmax";
  j["num_classes"] = cfg.num_classes;
  j["eval_per_block"] = cfg.eval_per_block;
  j["seed"] = cfg.seed;
  return j;
}

DataGenConfig config_from_json(const nlohmann::json& j) {
  DataGenConfig cfg;
  cfg.clients = j.at("N").get<std::int64_t>();
  cfg.blocks = j.at("M").get<std::int64_t>();
  cfg.total_samples = j.at("total_samples").get<std::int64_t>();
  cfg.feature_dim = j.at("d_f").get<Eigen::Index>();
  cfg.block_heterogeneity = j.at("block_heterogeneity").get<double>();
  cfg.client_heterogeneity = j.at("client_heterogeneity").get<double>();
  cfg.noise_std = j.at("noise_std").get<double>();
  cfg.feature_scale = j.at("feature_scale").get<double>();
  cfg.base_parameter_norm = j.at("base_parameter_norm").get<double>();
  const std::string task = j.at("task").get<std::string>();
  cfg.task = task == "regression" ? TaskKind::Regression
             : task == "logistic" ? TaskKind::Logistic
                                  : TaskKind::Softmax;
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.eval_per_block = j.at("eval_per_block").get<std::int64_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_dataset(const FederatedCyclicDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const DataGenConfig& cfg = data.config();

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = config_to_json(cfg);
  manifest["shuffled"] = data.shuffled();
  nlohmann::json counts = nlohmann::json::array();
  for (std::int64_t m = 1; m <= cfg.blocks; ++m) {
    nlohmann::json row = nlohmann::json::array();
    for (std::int64_t i = 1; i <= cfg.clients; ++i)
      row.push_back(static_cast<std::int64_t>(data.cell(m, i).samples.size()));
    counts.push_back(row);
  }
  manifest["cell_counts"] = counts;
  nlohmann::json evals = nlohmann::json::array();
  for (std::int64_t m = 1; m <= cfg.blocks; ++m)
    evals.push_back(static_cast<std::int64_t>(data.eval_set(m).size()));
  manifest["eval_counts"] = evals;
  nlohmann::json params = nlohmann::json::array();
  for (std::int64_t m = 1; m <= cfg.blocks; ++m) {
    nlohmann::json p = nlohmann::json::array();
    const Vector& v = data.block_parameter(m);
    for (Eigen::Index k = 0; k < v.size(); ++k) p.push_back(v[k]);
    params.push_back(p);
  }
  manifest["block_parameters"] = params;

  {
    std::ofstream out(dir / "dataset.json", std::ios::binary);
    if (!out) throw std::runtime_error("save_dataset: cannot open dataset.json for writing");
    out << manifest.dump(2) << "\n";
  }

  std::ofstream out(dir / "samples.tsv", std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset: cannot open samples.tsv for writing");
  auto write_sample = [&](const char* set, std::int64_t block, std::int64_t client, const Sample& s) {
    out << set << '\t' << block << '\t' << client << '\t' << format_double(s.target);
    for (Eigen::Index k = 0; k < s.features.size(); ++k) out << '\t' << format_double(s.features[k]);
    out << '\n';
  };
  for (std::int64_t m = 1; m <= cfg.blocks; ++m)
    for (std::int64_t i = 1; i <= cfg.clients; ++i)
      for (const Sample& s : data.cell(m, i).samples) write_sample("train", m, i, s);
  for (std::int64_t m = 1; m <= cfg.blocks; ++m)
    for (const Sample& s : data.eval_set(m)) write_sample("eval", m, 0, s);
}

FederatedCyclicDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "dataset.json", std::ios::binary);
  if (!mf) throw std::runtime_error("load_dataset: missing dataset.json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  const DataGenConfig cfg = config_from_json(manifest.at("config"));
  const bool shuffled = manifest.at("shuffled").get<bool>();

  std::vector<Vector> params;
  for (const auto& p : manifest.at("block_parameters")) {
    Vector v(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) v[static_cast<Eigen::Index>(k)] = p[k].get<double>();
    params.push_back(std::move(v));
  }

  std::vector<ClientBlockCell> grid(cfg.blocks * cfg.clients);
  for (std::int64_t m = 0; m < cfg.blocks; ++m)
    for (std::int64_t i = 0; i < cfg.clients; ++i) {
      grid[m * cfg.clients + i].block = m + 1;
      grid[m * cfg.clients + i].client = i + 1;
    }
  std::vector<std::vector<Sample>> eval_sets(cfg.blocks);

  std::ifstream sf(dir / "samples.tsv", std::ios::binary);
  if (!sf) throw std::runtime_error("load_dataset: missing samples.tsv");
  std::string line;
  while (std::getline(sf, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string set;
    std::int64_t block = 0, client = 0;
    Sample s;
    ss >> set >> block >> client >> s.target;
    std::vector<double> feats;
    double v = 0.0;
    while (ss >> v) feats.push_back(v);
    s.features = Eigen::Map<const Vector>(feats.data(), static_cast<Eigen::Index>(feats.size()));
    if (set == "train")
      grid[(block - 1) * cfg.clients + (client - 1)].samples.push_back(std::move(s));
    else
      eval_sets[block - 1].push_back(std::move(s));
  }
  assign_block_weights(grid, cfg.blocks, cfg.clients);
  return FederatedCyclicDataset(cfg, std::move(grid), std::move(eval_sets), std::move(params), shuffled);
}

double block_objective(const ObjectiveSpec& spec, const Vector& model, const FederatedCyclicDataset& data,
                       std::int64_t block) {
  const auto groups = data.block_groups(block);
  return empirical_block_objective(spec, model, groups);
}

double global_objective(const ObjectiveSpec& spec, const Vector& model, const FederatedCyclicDataset& data) {
  double acc = 0.0;
  for (std::int64_t m = 1; m <= data.blocks(); ++m) acc += block_objective(spec, model, data, m);
  return acc / static_cast<double>(data.blocks());
}

double block_eval_loss(const ObjectiveSpec& spec, const Vector& model, const FederatedCyclicDataset& data,
                       std::int64_t block) {
  const auto& samples = data.eval_set(block);
  if (samples.empty()) throw std::invalid_argument("block_eval_loss: block has no held-out samples");
  return group_mean_loss(spec, model, samples);
}

}  // namespace fedcyc
