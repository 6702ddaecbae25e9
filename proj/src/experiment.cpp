#include "fedcyc/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "fedcyc/schedule.hpp"
#include "fedcyc/trace_io.hpp"

namespace fedcyc {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void parse_fail(const std::string& where, const std::string& what) {
  throw ConfigParseError("config: " + where + ": " + what);
}

void reject_unknown_keys(const json& obj, const std::string& where,
                         std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* key : allowed)
      if (it.key() == key) {
        known = true;
        break;
      }
    if (!known) parse_fail(where, "unknown key '" + it.key() + "'");
  }
}

const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() || it->is_null() ? nullptr : &*it;
}

std::int64_t get_int(const json& obj, const std::string& where, const char* key,
                     std::optional<std::int64_t> fallback = {}) {
  const json* v = find(obj, key);
  if (!v) {
    if (fallback) return *fallback;
    parse_fail(where, std::string("missing required key '") + key + "'");
  }
  if (!v->is_number_integer() && !v->is_number_unsigned())
    parse_fail(where, std::string("'") + key + "' must be an integer");
  return v->get<std::int64_t>();
}

std::uint64_t get_seed(const json& obj, const std::string& where, const char* key, std::uint64_t fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (v->is_number_unsigned()) return v->get<std::uint64_t>();
  if (v->is_number_integer() && v->get<std::int64_t>() >= 0)
    return static_cast<std::uint64_t>(v->get<std::int64_t>());
  parse_fail(where, std::string("'") + key + "' must be a non-negative integer");
}

double get_double(const json& obj, const std::string& where, const char* key, double fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) parse_fail(where, std::string("'") + key + "' must be a number");
  return v->get<double>();
}

bool get_bool(const json& obj, const std::string& where, const char* key, bool fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) parse_fail(where, std::string("'") + key + "' must be a boolean");
  return v->get<bool>();
}

std::string get_string(const json& obj, const std::string& where, const char* key,
                       std::optional<std::string> fallback = {}) {
  const json* v = find(obj, key);
  if (!v) {
    if (fallback) return *fallback;
    parse_fail(where, std::string("missing required key '") + key + "'");
  }
  if (!v->is_string()) parse_fail(where, std::string("'") + key + "' must be a string");
  return v->get<std::string>();
}

// A learning rate is either a number or the string "theoretical".
std::optional<double> get_rate(const json& obj, const std::string& where, const char* key) {
  const json* v = find(obj, key);
  if (!v) return std::nullopt;
  if (v->is_string()) {
    if (v->get<std::string>() != "theoretical")
      parse_fail(where, std::string("'") + key + "' must be a number or \"theoretical\"");
    return std::nullopt;
  }
  if (!v->is_number()) parse_fail(where, std::string("'") + key + "' must be a number or \"theoretical\"");
  return v->get<double>();
}

TaskKind parse_task(const std::string& name, const std::string& where) {
  if (name == "regression") return TaskKind::Regression;
  if (name == "logistic") return TaskKind::Logistic;
  if (name == "softmax") return TaskKind::Softmax;
  parse_fail(where, "unknown task '" + name + "'");
}

const char* task_name(TaskKind task) {
  switch (task) {
    case TaskKind::Regression: return "regression";
    case TaskKind::Logistic: return "logistic";
    case TaskKind::Softmax: return "softmax";
  }
  return "regression";
}

const char* averaging_name(AveragingMode mode) {
  return mode == AveragingMode::Uniform ? "uniform" : "ewa";
}

const char* metrics_name(TraceMetrics level) {
  switch (level) {
    case TraceMetrics::None: return "none";
    case TraceMetrics::Eval: return "eval";
    case TraceMetrics::Full: return "full";
  }
  return "full";
}

ExperimentConfig parse_config_json(const json& root) {
  if (!root.is_object()) throw ConfigParseError("config: top level must be a JSON object");
  reject_unknown_keys(root, "top level", {"dataset", "objective", "schedule", "optimizer", "checks"});
  ExperimentConfig cfg;

  const json* dataset = find(root, "dataset");
  if (!dataset || !dataset->is_object()) throw ConfigParseError("config: missing 'dataset' object");
  reject_unknown_keys(*dataset, "dataset",
                      {"clients", "blocks", "total_samples", "feature_dim", "block_heterogeneity",
                       "client_heterogeneity", "noise_std", "feature_scale", "base_parameter_norm", "task",
                       "num_classes", "eval_per_block", "seed", "shuffle"});
  cfg.dataset.clients = get_int(*dataset, "dataset", "clients");
  cfg.dataset.blocks = get_int(*dataset, "dataset", "blocks");
  cfg.dataset.total_samples = get_int(*dataset, "dataset", "total_samples");
  cfg.dataset.feature_dim = get_int(*dataset, "dataset", "feature_dim");
  cfg.dataset.block_heterogeneity =
      get_double(*dataset, "dataset", "block_heterogeneity", cfg.dataset.block_heterogeneity);
  cfg.dataset.client_heterogeneity =
      get_double(*dataset, "dataset", "client_heterogeneity", cfg.dataset.client_heterogeneity);
  cfg.dataset.noise_std = get_double(*dataset, "dataset", "noise_std", cfg.dataset.noise_std);
  cfg.dataset.feature_scale = get_double(*dataset, "dataset", "feature_scale", cfg.dataset.feature_scale);
  cfg.dataset.base_parameter_norm =
      get_double(*dataset, "dataset", "base_parameter_norm", cfg.dataset.base_parameter_norm);
  cfg.dataset.task = parse_task(get_string(*dataset, "dataset", "task", "regression"), "dataset");
  cfg.dataset.num_classes = static_cast<int>(get_int(*dataset, "dataset", "num_classes", cfg.dataset.num_classes));
  cfg.dataset.eval_per_block = get_int(*dataset, "dataset", "eval_per_block", cfg.dataset.eval_per_block);
  cfg.dataset.seed = get_seed(*dataset, "dataset", "seed", cfg.dataset.seed);
  cfg.shuffle = get_bool(*dataset, "dataset", "shuffle", false);

  if (const json* objective = find(root, "objective")) {
    if (!objective->is_object()) throw ConfigParseError("config: 'objective' must be an object");
    reject_unknown_keys(*objective, "objective", {"lambda", "projection_radius"});
    cfg.lambda = get_double(*objective, "objective", "lambda", cfg.lambda);
    if (const json* radius = find(*objective, "projection_radius")) {
      if (!radius->is_number()) parse_fail("objective", "'projection_radius' must be a number or null");
      cfg.projection_radius = radius->get<double>();
    }
  }

  const json* schedule = find(root, "schedule");
  if (!schedule || !schedule->is_object()) throw ConfigParseError("config: missing 'schedule' object");
  reject_unknown_keys(*schedule, "schedule", {"cycles", "rounds_per_block", "local_iters"});
  cfg.cycles = get_int(*schedule, "schedule", "cycles");
  cfg.rounds_per_block = get_int(*schedule, "schedule", "rounds_per_block");
  if (const json* li = find(*schedule, "local_iters")) {
    if (li->is_string()) {
      if (li->get<std::string>() != "max")
        parse_fail("schedule", "'local_iters' must be an integer or \"max\"");
      cfg.local_iters = std::nullopt;
    } else if (li->is_number_integer() || li->is_number_unsigned()) {
      cfg.local_iters = li->get<std::int64_t>();
    } else {
      parse_fail("schedule", "'local_iters' must be an integer or \"max\"");
    }
  } else {
    parse_fail("schedule", "missing required key 'local_iters'");
  }

  const json* optimizer = find(root, "optimizer");
  if (!optimizer || !optimizer->is_object()) throw ConfigParseError("config: missing 'optimizer' object");
  reject_unknown_keys(*optimizer, "optimizer",
                      {"algorithm", "gamma", "eta", "batch_size", "full_batch", "averaging", "ewa_base",
                       "participation_rate", "threads", "master_seed", "trace_metrics"});
  try {
    cfg.algorithm = parse_algorithm(get_string(*optimizer, "optimizer", "algorithm"));
  } catch (const std::invalid_argument& e) {
    throw ConfigParseError(std::string("config: optimizer: ") + e.what());
  }
  cfg.gamma = get_rate(*optimizer, "optimizer", "gamma");
  if (find(*optimizer, "eta")) {
    std::optional<double> eta = get_rate(*optimizer, "optimizer", "eta");
    // A "theoretical" eta outside mc-psgd is still an error; flag it with an
    // inadmissible value so validation rejects it.
    cfg.eta = cfg.algorithm != Algorithm::McPsgd && !eta ? std::optional<double>(0.0) : eta;
  }
  cfg.batch_size = get_int(*optimizer, "optimizer", "batch_size", cfg.batch_size);
  cfg.full_batch = get_bool(*optimizer, "optimizer", "full_batch", cfg.full_batch);
  const std::string averaging = get_string(*optimizer, "optimizer", "averaging", "uniform");
  if (averaging == "uniform")
    cfg.averaging = AveragingMode::Uniform;
  else if (averaging == "ewa")
    cfg.averaging = AveragingMode::Ewa;
  else
    parse_fail("optimizer", "'averaging' must be \"uniform\" or \"ewa\"");
  cfg.ewa_base = get_double(*optimizer, "optimizer", "ewa_base", cfg.ewa_base);
  cfg.participation_rate = get_double(*optimizer, "optimizer", "participation_rate", cfg.participation_rate);
  cfg.threads = static_cast<int>(get_int(*optimizer, "optimizer", "threads", cfg.threads));
  cfg.master_seed = get_seed(*optimizer, "optimizer", "master_seed", cfg.master_seed);
  const std::string metrics = get_string(*optimizer, "optimizer", "trace_metrics", "full");
  if (metrics == "none")
    cfg.trace_metrics = TraceMetrics::None;
  else if (metrics == "eval")
    cfg.trace_metrics = TraceMetrics::Eval;
  else if (metrics == "full")
    cfg.trace_metrics = TraceMetrics::Full;
  else
    parse_fail("optimizer", "'trace_metrics' must be \"none\", \"eval\" or \"full\"");

  if (const json* checks = find(root, "checks")) {
    if (!checks->is_object()) throw ConfigParseError("config: 'checks' must be an object");
    reject_unknown_keys(*checks, "checks",
                        {"deviation_bound", "variance_scaling", "reduction", "variance_resamples",
                         "variance_counts"});
    cfg.checks.deviation_bound = get_bool(*checks, "checks", "deviation_bound", cfg.checks.deviation_bound);
    cfg.checks.variance_scaling = get_bool(*checks, "checks", "variance_scaling", cfg.checks.variance_scaling);
    cfg.checks.reduction = get_bool(*checks, "checks", "reduction", cfg.checks.reduction);
    cfg.checks.variance_resamples =
        get_int(*checks, "checks", "variance_resamples", cfg.checks.variance_resamples);
    if (const json* counts = find(*checks, "variance_counts")) {
      if (!counts->is_array()) parse_fail("checks", "'variance_counts' must be an array of integers");
      for (const json& v : *counts) {
        if (!v.is_number_integer() && !v.is_number_unsigned())
          parse_fail("checks", "'variance_counts' must be an array of integers");
        cfg.checks.variance_counts.push_back(v.get<std::int64_t>());
      }
    }
  }
  return cfg;
}

std::int64_t participants_of(const ExperimentConfig& cfg) {
  return std::max<std::int64_t>(
      1, std::llround(cfg.participation_rate * static_cast<double>(cfg.dataset.clients)));
}

std::int64_t resolve_local_iters(const ExperimentConfig& cfg) {
  if (cfg.local_iters) return *cfg.local_iters;
  const std::int64_t n = participants_of(cfg);
  const double rounds = static_cast<double>(cfg.cycles) * static_cast<double>(cfg.rounds_per_block) *
                        (cfg.algorithm == Algorithm::McPsgd ? 1.0 : static_cast<double>(cfg.dataset.blocks));
  // The admissible cap I <= (horizon)^(1/4) / n^(3/4) with horizon = rounds * I
  // solves in closed form to I <= rounds^(1/3) / n.
  std::int64_t iters =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(std::cbrt(rounds) /
                                                                     static_cast<double>(n) + 1e-9)));
  while (iters > 1 &&
         iters > max_local_iterations(cfg.cycles * cfg.dataset.blocks * cfg.rounds_per_block * iters, n,
                                      cfg.dataset.blocks, cfg.algorithm))
    --iters;
  return iters;
}

CyclePlan resolve_plan(const ExperimentConfig& cfg) {
  return CyclePlan{cfg.cycles, cfg.dataset.blocks, cfg.rounds_per_block, resolve_local_iters(cfg)};
}

ObjectiveSpec make_objective_spec(const ExperimentConfig& cfg) {
  ObjectiveSpec spec;
  switch (cfg.dataset.task) {
    case TaskKind::Regression: spec.kind = LossKind::LeastSquares; break;
    case TaskKind::Logistic: spec.kind = LossKind::Logistic; break;
    case TaskKind::Softmax: spec.kind = LossKind::Softmax; break;
  }
  spec.dim = cfg.dataset.parameter_dim();
  spec.lambda = cfg.lambda;
  spec.projection_radius = cfg.projection_radius;
  spec.num_classes = cfg.dataset.task == TaskKind::Softmax ? cfg.dataset.num_classes : 1;
  return spec;
}

OptimizerConfig resolve_optimizer(const ExperimentConfig& cfg, const ProblemConstants& constants) {
  OptimizerConfig oc;
  oc.algorithm = cfg.algorithm;
  oc.plan = resolve_plan(cfg);
  const std::int64_t n = participants_of(cfg);
  const std::int64_t total = oc.plan.total_iterations();
  oc.gamma = cfg.gamma ? *cfg.gamma : theoretical_gamma(n, total, constants.L);
  if (cfg.algorithm == Algorithm::McPsgd)
    oc.eta = cfg.eta ? *cfg.eta : theoretical_eta(n, cfg.dataset.blocks, total, constants.L);
  oc.batch_size = cfg.batch_size;
  oc.averaging = cfg.averaging;
  oc.ewa_base = cfg.ewa_base;
  oc.participation_rate = cfg.participation_rate;
  oc.pool_size = cfg.dataset.clients;
  oc.master_seed = cfg.master_seed;
  oc.full_batch = cfg.full_batch;
  oc.trace_metrics = cfg.trace_metrics;
  oc.threads = cfg.threads;
  return oc;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigParseError(std::string("config: invalid JSON: ") + e.what());
  }
  return parse_config_json(root);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigParseError("config: cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_experiment_config(buffer.str());
}

void validate_experiment_config(const ExperimentConfig& config) {
  try {
    config.dataset.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigValidationError(std::string("config: dataset: ") + e.what());
  }
  if (!(config.lambda > 0.0)) throw ConfigValidationError("config: objective: lambda must be > 0");
  if (config.projection_radius && !(*config.projection_radius > 0.0))
    throw ConfigValidationError("config: objective: projection_radius must be > 0");
  if (config.cycles < 1) throw ConfigValidationError("config: schedule: cycles must be >= 1");
  if (config.rounds_per_block < 1)
    throw ConfigValidationError("config: schedule: rounds_per_block must be >= 1");
  if (config.local_iters && *config.local_iters < 1)
    throw ConfigValidationError("config: schedule: local_iters must be >= 1");
  if (config.gamma && !(*config.gamma > 0.0))
    throw ConfigValidationError("config: optimizer: gamma must be > 0");
  if (config.algorithm != Algorithm::McPsgd && config.eta)
    throw ConfigValidationError("config: optimizer: eta is only meaningful for mc-psgd");
  if (config.eta && !(*config.eta > 0.0))
    throw ConfigValidationError("config: optimizer: eta must be > 0");
  if (config.batch_size < 1) throw ConfigValidationError("config: optimizer: batch_size must be >= 1");
  if (config.averaging == AveragingMode::Ewa && (!(config.ewa_base > 0.0) || !(config.ewa_base < 1.0)))
    throw ConfigValidationError("config: optimizer: ewa_base must be in (0, 1)");
  if (!(config.participation_rate > 0.0) || config.participation_rate > 1.0)
    throw ConfigValidationError("config: optimizer: participation_rate must be in (0, 1]");
  if (config.participation_rate * static_cast<double>(config.dataset.clients) < 1.0 - 1e-12)
    throw ConfigValidationError("config: optimizer: participation_rate selects no clients");
  if (config.threads < 1) throw ConfigValidationError("config: optimizer: threads must be >= 1");
  if (config.checks.variance_scaling && config.checks.variance_resamples < 1000)
    throw ConfigValidationError("config: checks: variance_resamples must be >= 1000");
  for (std::int64_t n : config.checks.variance_counts)
    if (n < 1 || n > config.dataset.clients)
      throw ConfigValidationError("config: checks: variance_counts entries must lie in 1..clients");

  if (!config.gamma || (config.algorithm == Algorithm::McPsgd && !config.eta)) {
    const CyclePlan plan = resolve_plan(config);
    const std::int64_t lhs = plan.iters_per_block();
    const std::int64_t rhs = config.cycles * config.dataset.blocks * participants_of(config);
    if (lhs <= rhs)
      throw ConfigValidationError(
          "config: theoretical rates require rounds_per_block * local_iters > cycles * blocks * participants");
  }
}

std::string canonical_config_json(const ExperimentConfig& config) {
  ordered_json dataset;
  dataset["clients"] = config.dataset.clients;
  dataset["blocks"] = config.dataset.blocks;
  dataset["total_samples"] = config.dataset.total_samples;
  dataset["feature_dim"] = static_cast<std::int64_t>(config.dataset.feature_dim);
  dataset["block_heterogeneity"] = config.dataset.block_heterogeneity;
  dataset["client_heterogeneity"] = config.dataset.client_heterogeneity;
  dataset["noise_std"] = config.dataset.noise_std;
  dataset["feature_scale"] = config.dataset.feature_scale;
  dataset["base_parameter_norm"] = config.dataset.base_parameter_norm;
  dataset["task"] = task_name(config.dataset.task);
  dataset["num_classes"] = config.dataset.num_classes;
  dataset["eval_per_block"] = config.dataset.eval_per_block;
  dataset["seed"] = config.dataset.seed;
  dataset["shuffle"] = config.shuffle;

  ordered_json objective;
  objective["lambda"] = config.lambda;
  if (config.projection_radius)
    objective["projection_radius"] = *config.projection_radius;
  else
    objective["projection_radius"] = nullptr;

  ordered_json schedule;
  schedule["cycles"] = config.cycles;
  schedule["rounds_per_block"] = config.rounds_per_block;
  if (config.local_iters)
    schedule["local_iters"] = *config.local_iters;
  else
    schedule["local_iters"] = "max";

  ordered_json optimizer;
  optimizer["algorithm"] = algorithm_name(config.algorithm);
  if (config.gamma)
    optimizer["gamma"] = *config.gamma;
  else
    optimizer["gamma"] = "theoretical";
  if (config.algorithm == Algorithm::McPsgd) {
    if (config.eta)
      optimizer["eta"] = *config.eta;
    else
      optimizer["eta"] = "theoretical";
  }
  optimizer["batch_size"] = config.batch_size;
  optimizer["full_batch"] = config.full_batch;
  optimizer["averaging"] = averaging_name(config.averaging);
  optimizer["ewa_base"] = config.ewa_base;
  optimizer["participation_rate"] = config.participation_rate;
  optimizer["threads"] = config.threads;
  optimizer["master_seed"] = config.master_seed;
  optimizer["trace_metrics"] = metrics_name(config.trace_metrics);

  ordered_json checks;
  checks["deviation_bound"] = config.checks.deviation_bound;
  checks["variance_scaling"] = config.checks.variance_scaling;
  checks["reduction"] = config.checks.reduction;
  checks["variance_resamples"] = config.checks.variance_resamples;
  checks["variance_counts"] = config.checks.variance_counts;

  ordered_json root;
  root["dataset"] = dataset;
  root["objective"] = objective;
  root["schedule"] = schedule;
  root["optimizer"] = optimizer;
  root["checks"] = checks;
  return root.dump(2) + "\n";
}

std::string compute_run_id(const std::string& canonical_config) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_config)));
  return buf;
}

ExperimentOutput run_experiment(const ExperimentConfig& config) {
  validate_experiment_config(config);
  ExperimentOutput out;
  out.config = config;
  out.canonical_config = canonical_config_json(config);
  out.run_id = compute_run_id(out.canonical_config);

  FederatedCyclicDataset data = generate(config.dataset);
  if (config.shuffle) data = shuffled_variant(data);

  out.spec = make_objective_spec(config);
  const std::vector<WeightedGroup> pooled = data.pooled_groups();
  out.constants = estimate_constants(out.spec, pooled);
  out.optimizer = resolve_optimizer(config, out.constants);
  out.optimizer.validate();
  out.comparators = solve_comparators(out.spec, data);

  switch (config.algorithm) {
    case Algorithm::FedAvg: out.result = run_fedavg(out.optimizer, data, out.spec); break;
    case Algorithm::MmPsgd: out.result = run_mm_psgd(out.optimizer, data, out.spec); break;
    case Algorithm::McPsgd: out.result = run_mc_psgd(out.optimizer, data, out.spec); break;
  }
  out.gaps = gap_report(out.spec, data, out.result, out.comparators);

  if (config.checks.deviation_bound) {
    out.checks.deviation =
        check_deviation_bound(out.result.trace, out.optimizer.gamma, out.optimizer.plan.local_iters);
    out.checks.deviation_status = out.checks.deviation.passed ? "passed" : "failed";
  }
  if (config.checks.variance_scaling) {
    std::optional<FederatedCyclicDataset> reshuffled;
    const FederatedCyclicDataset* homogeneous = &data;
    if (!config.shuffle) {
      reshuffled = shuffled_variant(data);
      homogeneous = &*reshuffled;
    }
    std::vector<std::int64_t> counts = config.checks.variance_counts;
    if (counts.empty()) {
      counts.push_back(1);
      if (config.dataset.clients > 1) counts.push_back(config.dataset.clients);
    }
    out.checks.variance = check_variance_scaling(out.spec, *homogeneous, counts,
                                                 config.checks.variance_resamples, config.master_seed);
    out.checks.variance_status = out.checks.variance.passed ? "passed" : "failed";
  }
  if (!config.checks.reduction) {
    out.checks.reduction_status = "skipped";
  } else if (config.dataset.clients == 1 && config.participation_rate == 1.0 && config.full_batch) {
    out.checks.reduction_error = reduction_oracle_sequential(out.spec, data, out.optimizer, out.result.trace);
    out.checks.reduction_status = out.checks.reduction_error <= 1e-10 ? "passed" : "failed";
  } else {
    out.checks.reduction_status = "not applicable";
  }
  return out;
}

std::string render_summary_json(const ExperimentOutput& output) {
  ordered_json schedule;
  schedule["cycles"] = output.optimizer.plan.cycles;
  schedule["blocks"] = output.optimizer.plan.blocks;
  schedule["rounds_per_block"] = output.optimizer.plan.rounds_per_block;
  schedule["local_iters"] = output.optimizer.plan.local_iters;
  schedule["total_iterations"] = output.optimizer.plan.total_iterations();
  schedule["rounds"] = output.optimizer.plan.total_rounds();

  ordered_json rates;
  rates["gamma"] = output.optimizer.gamma;
  if (output.optimizer.eta)
    rates["eta"] = *output.optimizer.eta;
  else
    rates["eta"] = nullptr;

  ordered_json constants;
  constants["mu"] = output.constants.mu;
  constants["L"] = output.constants.L;
  constants["sigma2"] = output.constants.sigma2;
  constants["G2"] = output.constants.G2;

  ordered_json final_state;
  final_state["global_objective"] = output.gaps.fedavg_gap + output.comparators.global_value;
  final_state["global_optimum_value"] = output.comparators.global_value;
  final_state["minimax_gap"] = output.gaps.minimax_gap;
  final_state["fedavg_gap"] = output.gaps.fedavg_gap;
  final_state["block_gaps"] = output.gaps.block_gaps;

  ordered_json deviation;
  deviation["status"] = output.checks.deviation_status;
  deviation["worst_ratio"] = output.checks.deviation.worst_ratio;
  deviation["worst_round"] = output.checks.deviation.worst_round;

  ordered_json variance;
  variance["status"] = output.checks.variance_status;
  ordered_json rows = ordered_json::array();
  for (const VarianceRow& row : output.checks.variance.rows) {
    ordered_json r;
    r["participants"] = row.participants;
    r["variance"] = row.variance;
    r["bound"] = row.bound;
    r["within_bound"] = row.within_bound;
    rows.push_back(r);
  }
  variance["rows"] = rows;

  ordered_json reduction;
  reduction["status"] = output.checks.reduction_status;
  reduction["max_error"] = output.checks.reduction_error;

  ordered_json checks;
  checks["deviation_bound"] = deviation;
  checks["variance_scaling"] = variance;
  checks["reduction"] = reduction;

  ordered_json root;
  root["run_id"] = output.run_id;
  root["algorithm"] = algorithm_name(output.optimizer.algorithm);
  root["schedule"] = schedule;
  root["rates"] = rates;
  root["constants"] = constants;
  root["final"] = final_state;
  root["checks"] = checks;
  return root.dump(2) + "\n";
}

void write_run(const std::filesystem::path& dir, const ExperimentOutput& output) {
  std::filesystem::create_directories(dir);
  write_text_atomic(dir / "config.json", output.canonical_config);
  write_trace_table(dir / "trace.tsv", output.run_id, output.optimizer, output.result.trace,
                    &output.comparators);
  write_text_atomic(dir / "summary.json", render_summary_json(output));
}

ExperimentOutput run_and_write(const ExperimentConfig& config, const std::filesystem::path& dir) {
  validate_experiment_config(config);
  std::filesystem::create_directories(dir);
  try {
    ExperimentOutput output = run_experiment(config);
    write_run(dir, output);
    return output;
  } catch (const std::exception& e) {
    write_text_atomic(dir / "FAILED", std::string(e.what()) + "\n");
    throw;
  }
}

namespace {

std::string axis_value_label(double value) {
  if (value == std::floor(value) && std::abs(value) < 1e15)
    return std::to_string(static_cast<std::int64_t>(value));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", value);
  return buf;
}

std::int64_t integral_axis_value(const std::string& axis, double value) {
  if (value != std::floor(value) || value < 1.0)
    throw ConfigValidationError("sweep: axis '" + axis + "' needs positive integer values");
  return static_cast<std::int64_t>(value);
}

ExperimentConfig apply_axis(const ExperimentConfig& base, const std::string& axis, double value) {
  ExperimentConfig cfg = base;
  if (axis == "cycles") {
    cfg.cycles = integral_axis_value(axis, value);
  } else if (axis == "local_iters") {
    cfg.local_iters = integral_axis_value(axis, value);
  } else if (axis == "blocks") {
    const std::int64_t blocks = integral_axis_value(axis, value);
    const std::int64_t budget = base.dataset.blocks * base.rounds_per_block;
    if (budget % blocks != 0)
      throw ConfigValidationError("sweep: blocks axis values must divide blocks * rounds_per_block");
    cfg.dataset.blocks = blocks;
    cfg.rounds_per_block = budget / blocks;
  } else if (axis == "clients") {
    cfg.dataset.clients = integral_axis_value(axis, value);
  } else if (axis == "participation_rate") {
    cfg.participation_rate = value;
  } else {
    throw ConfigValidationError("sweep: unknown axis '" + axis + "'");
  }
  return cfg;
}

}  // namespace

namespace {

// Mean of the per-block predictor losses recorded at one round, minus the
// pooled optimum: the per-round minimax gap.
std::optional<double> round_minimax_gap(const RoundRecord& rec, const Comparators& comparators,
                                        std::int64_t blocks) {
  if (static_cast<std::int64_t>(rec.predictor_block_losses.size()) != blocks) return std::nullopt;
  double mean = 0.0;
  for (double v : rec.predictor_block_losses) mean += v;
  return mean / static_cast<double>(blocks) - comparators.global_value;
}

// 1-based index of the first round whose minimax gap drops to the threshold;
// unset when the run never reaches it or the trace lacks per-round losses.
std::optional<std::int64_t> rounds_to_threshold(const ExperimentOutput& output, double threshold) {
  const std::int64_t blocks = output.optimizer.plan.blocks;
  std::int64_t round = 0;
  for (const RoundRecord& rec : output.result.trace.rounds) {
    ++round;
    const std::optional<double> gap = round_minimax_gap(rec, output.comparators, blocks);
    if (!gap) return std::nullopt;
    if (*gap <= threshold) return round;
  }
  return std::nullopt;
}

}  // namespace

std::string run_sweep(const ExperimentConfig& base, const SweepOptions& options,
                      const std::filesystem::path& out_dir) {
  if (options.values.empty()) throw ConfigValidationError("sweep: no axis values given");
  std::vector<ExperimentConfig> configs;
  for (double value : options.values) configs.push_back(apply_axis(base, options.axis, value));
  for (const ExperimentConfig& cfg : configs) validate_experiment_config(cfg);

  std::filesystem::create_directories(out_dir);
  std::string text;
  text +=
      "axis\tvalue\trun_id\ttotal_iterations\tminimax_gap\tfedavg_gap\tmean_block_gap\tgap_threshold\t"
      "rounds_to_threshold\tdeviation_bound\tvariance_scaling\treduction\n";
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const std::string label = axis_value_label(options.values[i]);
    const ExperimentOutput output =
        run_and_write(configs[i], out_dir / (options.axis + "-" + label));
    double mean_gap = 0.0;
    for (double g : output.gaps.block_gaps) mean_gap += g;
    mean_gap /= static_cast<double>(output.gaps.block_gaps.size());
    const double threshold =
        options.gap_threshold.value_or(2.0 * std::max(output.gaps.minimax_gap, 0.0));
    const std::optional<std::int64_t> reached = rounds_to_threshold(output, threshold);

    text += options.axis;
    text += '\t' + label;
    text += '\t' + output.run_id;
    text += '\t' + std::to_string(output.optimizer.plan.total_iterations());
    text += '\t' + fmt_double(output.gaps.minimax_gap);
    text += '\t' + fmt_double(output.gaps.fedavg_gap);
    text += '\t' + fmt_double(mean_gap);
    text += '\t' + fmt_double(threshold);
    text += '\t';
    text += reached ? std::to_string(*reached) : "-";
    text += '\t' + output.checks.deviation_status;
    text += '\t' + output.checks.variance_status;
    text += '\t' + output.checks.reduction_status;
    text += '\n';
  }
  write_text_atomic(out_dir / "summary.tsv", text);
  return text;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace

namespace {

std::string read_text_file(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

struct TsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::runtime_error("report: missing column '" + name + "'");
  }
};

TsvTable read_tsv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path, "report"));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("report: empty table " + path.string());
  TsvTable table;
  table.header = split_tabs(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    table.rows.push_back(split_tabs(line));
    if (table.rows.back().size() != table.header.size())
      throw std::runtime_error("report: malformed row in " + path.string());
  }
  return table;
}

// Last trace row of every cycle with a parseable positive minimax gap.
void cycle_checkpoints(const TsvTable& trace, std::vector<double>& horizons, std::vector<double>& gaps) {
  const std::size_t col_t = trace.column("t");
  const std::size_t col_cycle = trace.column("cycle");
  const std::size_t col_gap = trace.column("minimax_gap");
  std::string last_cycle;
  const std::vector<std::string>* last_row = nullptr;
  auto flush = [&]() {
    if (!last_row) return;
    const std::string& cell = (*last_row)[col_gap];
    if (cell == "-") return;
    const double gap = std::stod(cell);
    if (gap > 0.0) {
      horizons.push_back(std::stod((*last_row)[col_t]));
      gaps.push_back(gap);
    }
  };
  for (const auto& row : trace.rows) {
    if (row[col_cycle] != last_cycle) {
      flush();
      last_cycle = row[col_cycle];
    }
    last_row = &row;
  }
  flush();
}

std::string render_run_report(const std::filesystem::path& run_dir) {
  json summary;
  try {
    summary = json::parse(read_text_file(run_dir / "summary.json", "report"));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("report: malformed summary.json: ") + e.what());
  }
  std::string text;
  char buf[256];
  text += "run " + summary.at("run_id").get<std::string>() + " (" +
          summary.at("algorithm").get<std::string>() + ")\n";
  const json& sched = summary.at("schedule");
  std::snprintf(buf, sizeof(buf),
                "schedule: cycles=%lld blocks=%lld rounds_per_block=%lld local_iters=%lld "
                "total_iterations=%lld\n",
                sched.at("cycles").get<long long>(), sched.at("blocks").get<long long>(),
                sched.at("rounds_per_block").get<long long>(), sched.at("local_iters").get<long long>(),
                sched.at("total_iterations").get<long long>());
  text += buf;
  const json& rates = summary.at("rates");
  std::snprintf(buf, sizeof(buf), "rates: gamma=%.17g", rates.at("gamma").get<double>());
  text += buf;
  if (!rates.at("eta").is_null()) {
    std::snprintf(buf, sizeof(buf), " eta=%.17g", rates.at("eta").get<double>());
    text += buf;
  }
  text += "\n\ngap report\n";
  const json& final_state = summary.at("final");
  const json& block_gaps = final_state.at("block_gaps");
  for (std::size_t m = 0; m < block_gaps.size(); ++m) {
    std::snprintf(buf, sizeof(buf), "  block %zu gap: %.17g\n", m + 1, block_gaps[m].get<double>());
    text += buf;
  }
  std::snprintf(buf, sizeof(buf), "  minimax gap: %.17g\n", final_state.at("minimax_gap").get<double>());
  text += buf;
  std::snprintf(buf, sizeof(buf), "  final global gap: %.17g\n", final_state.at("fedavg_gap").get<double>());
  text += buf;

  text += "\nchecks\n";
  const json& checks = summary.at("checks");
  const json& deviation = checks.at("deviation_bound");
  text += "  deviation bound: " + deviation.at("status").get<std::string>();
  if (deviation.at("status").get<std::string>() != "skipped") {
    std::snprintf(buf, sizeof(buf), " (worst ratio %.6g at t=%lld)",
                  deviation.at("worst_ratio").get<double>(),
                  deviation.at("worst_round").get<long long>());
    text += buf;
  }
  text += '\n';
  const json& variance = checks.at("variance_scaling");
  text += "  variance scaling: " + variance.at("status").get<std::string>() + '\n';
  for (const json& row : variance.at("rows")) {
    std::snprintf(buf, sizeof(buf), "    participants=%lld variance=%.6g bound=%.6g\n",
                  row.at("participants").get<long long>(), row.at("variance").get<double>(),
                  row.at("bound").get<double>());
    text += buf;
  }
  const json& reduction = checks.at("reduction");
  text += "  reduction: " + reduction.at("status").get<std::string>();
  const std::string reduction_status = reduction.at("status").get<std::string>();
  if (reduction_status == "passed" || reduction_status == "failed") {
    std::snprintf(buf, sizeof(buf), " (max error %.6g)", reduction.at("max_error").get<double>());
    text += buf;
  }
  text += '\n';

  std::vector<double> horizons, gaps;
  cycle_checkpoints(read_tsv(run_dir / "trace.tsv"), horizons, gaps);
  bool fitted = false;
  if (horizons.size() >= 3) {
    bool distinct = true;
    for (std::size_t i = 1; i < horizons.size(); ++i)
      if (horizons[i] == horizons[0]) distinct = false;
    if (distinct) {
      const SlopeFit fit = fit_slope(horizons, gaps);
      std::snprintf(buf, sizeof(buf),
                    "\nminimax gap over cycle checkpoints: slope %.4f (r^2 %.4f, %zu checkpoints)\n",
                    fit.slope, fit.r_squared, horizons.size());
      text += buf;
      fitted = true;
    }
  }
  if (!fitted) text += "\nminimax gap over cycle checkpoints: insufficient data for a slope fit\n";
  return text;
}

std::string render_sweep_report(const std::filesystem::path& sweep_dir) {
  const TsvTable table = read_tsv(sweep_dir / "summary.tsv");
  if (table.rows.empty()) throw std::runtime_error("report: no runs in " + sweep_dir.string());
  const std::size_t col_axis = table.column("axis");
  const std::size_t col_value = table.column("value");
  const std::size_t col_total = table.column("total_iterations");
  const std::size_t col_gap = table.column("minimax_gap");

  std::vector<std::size_t> widths(table.header.size());
  for (std::size_t i = 0; i < table.header.size(); ++i) widths[i] = table.header[i].size();
  for (const auto& row : table.rows)
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());

  std::string text = "sweep over axis '" + table.rows[0][col_axis] + "', " +
                     std::to_string(table.rows.size()) + " run(s)\n\n";
  auto append_row = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      text += row[i];
      if (i + 1 < row.size()) text.append(widths[i] - row[i].size() + 2, ' ');
    }
    text += '\n';
  };
  append_row(table.header);
  for (const auto& row : table.rows) append_row(row);

  std::vector<double> horizons, gaps;
  for (const auto& row : table.rows) {
    const double total = std::stod(row[col_total]);
    const double gap = std::stod(row[col_gap]);
    if (gap > 0.0 && std::find(horizons.begin(), horizons.end(), total) == horizons.end()) {
      horizons.push_back(total);
      gaps.push_back(gap);
    }
  }
  if (horizons.size() >= 3) {
    const SlopeFit fit = fit_slope(horizons, gaps);
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "\nminimax gap vs total iterations: slope %.4f (r^2 %.4f) over %zu horizons\n",
                  fit.slope, fit.r_squared, horizons.size());
    text += buf;
  }
  text += "\naxis values: ";
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    if (i) text += ", ";
    text += table.rows[i][col_value];
  }
  text += '\n';
  return text;
}

}  // namespace

std::string render_report(const std::filesystem::path& dir) {
  std::string text;
  if (std::filesystem::exists(dir / "summary.json"))
    text = render_run_report(dir);
  else if (std::filesystem::exists(dir / "summary.tsv"))
    text = render_sweep_report(dir);
  else
    throw std::runtime_error("report: no summary.json or summary.tsv in " + dir.string());
  write_text_atomic(dir / "report.txt", text);
  return text;
}

}  // namespace fedcyc
