// Rendering of run traces as tab-separated tables and atomic file output.
#pragma once

#include <filesystem>
#include <string>

#include "fedcyc/algorithms.hpp"
#include "fedcyc/analysis.hpp"

namespace fedcyc {

std::string algorithm_name(Algorithm algorithm);
Algorithm parse_algorithm(const std::string& name);

// Writes `content` to `path` via a sibling temp file and an atomic rename, so
// readers never observe a half-written file.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

// One row per communication round. Columns that do not apply to a run (for
// example the chain selector outside mc-psgd, or losses suppressed by the
// metrics level) hold "-". When `comparators` is null the gap columns hold
// "-" as well. Numbers are printed with %.17g so a rerun of the same
// configuration reproduces the table byte for byte.
std::string render_trace_table(const std::string& run_id, const OptimizerConfig& config,
                               const RunTrace& trace, const Comparators* comparators);

void write_trace_table(const std::filesystem::path& path, const std::string& run_id,
                       const OptimizerConfig& config, const RunTrace& trace,
                       const Comparators* comparators);

}  // namespace fedcyc
