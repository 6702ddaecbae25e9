#include "fedcyc/trace_io.hpp"

#include <cstdio>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <system_error>

namespace fedcyc {

std::string algorithm_name(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::FedAvg: return "fedavg";
    case Algorithm::MmPsgd: return "mm-psgd";
    case Algorithm::McPsgd: return "mc-psgd";
  }
  throw std::invalid_argument("algorithm_name: unknown algorithm");
}

Algorithm parse_algorithm(const std::string& name) {
  if (name == "fedavg") return Algorithm::FedAvg;
  if (name == "mm-psgd") return Algorithm::MmPsgd;
  if (name == "mc-psgd") return Algorithm::McPsgd;
  throw std::invalid_argument("parse_algorithm: unknown algorithm '" + name + "'");
}

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_text_atomic: cannot open " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write_text_atomic: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("write_text_atomic: rename failed for " + path.string() + ": " + ec.message());
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void append_opt(std::string& row, const std::optional<double>& v) {
  row += '\t';
  row += v ? fmt(*v) : "-";
}

}  // namespace

std::string render_trace_table(const std::string& run_id, const OptimizerConfig& config,
                               const RunTrace& trace, const Comparators* comparators) {
  const std::int64_t blocks = config.plan.blocks;
  const bool full_metrics = config.trace_metrics == TraceMetrics::Full;
  const bool eval_metrics = config.trace_metrics != TraceMetrics::None;
  const double dev_factor = 4.0 * config.gamma * config.gamma *
                            static_cast<double>(config.plan.local_iters) *
                            static_cast<double>(config.plan.local_iters);
  std::string out;
  out += "run_id\talgorithm\tt\tcycle\tblock\tround_in_block\tglobal_loss\tglobal_eval_loss\t"
         "predictor_eval_loss\tminimax_gap\tselected_chain\tdeviation_ratio";
  for (std::int64_t m = 1; m <= blocks; ++m) out += "\tgap_block_" + std::to_string(m);
  out += '\n';
  const std::string prefix = run_id + '\t' + algorithm_name(config.algorithm) + '\t';
  for (const RoundRecord& rec : trace.rounds) {
    std::string row = prefix;
    row += std::to_string(rec.t);
    row += '\t' + std::to_string(rec.cycle);
    row += '\t' + std::to_string(rec.block);
    row += '\t' + std::to_string(rec.round_in_block);
    append_opt(row, full_metrics ? std::optional<double>(rec.global_loss) : std::nullopt);
    append_opt(row, eval_metrics ? std::optional<double>(rec.global_eval_loss) : std::nullopt);
    append_opt(row, eval_metrics ? std::optional<double>(rec.predictor_eval_loss) : std::nullopt);

    const bool have_gaps = comparators != nullptr &&
                           static_cast<std::int64_t>(rec.predictor_block_losses.size()) == blocks;
    if (have_gaps) {
      double mean_value = 0.0;
      for (double v : rec.predictor_block_losses) mean_value += v;
      mean_value /= static_cast<double>(blocks);
      row += '\t' + fmt(mean_value - comparators->global_value);
    } else {
      row += "\t-";
    }

    if (rec.selected_chain < 0)
      row += "\t-";
    else
      row += '\t' + std::to_string(rec.selected_chain);

    const double bound = dev_factor * rec.grad_norm_sq_max;
    if (bound > 0.0)
      row += '\t' + fmt(rec.deviation_sq / bound);
    else
      row += "\t-";

    for (std::int64_t m = 1; m <= blocks; ++m) {
      if (have_gaps)
        row += '\t' + fmt(rec.predictor_block_losses[m - 1] - comparators->block_values[m - 1]);
      else
        row += "\t-";
    }
    out += row;
    out += '\n';
  }
  return out;
}

void write_trace_table(const std::filesystem::path& path, const std::string& run_id,
                       const OptimizerConfig& config, const RunTrace& trace,
                       const Comparators* comparators) {
  write_text_atomic(path, render_trace_table(run_id, config, trace, comparators));
}

}  // namespace fedcyc
