#pragma once

#include <cstdint>

namespace fedcyc {

/// Block-cyclic training calendar: cycles (C) x blocks (M) x iterations per
/// block (K = rounds_per_block * local_iters). All public indices are 1-based.
struct CyclePlan {
  std::int64_t cycles = 1;            // C
  std::int64_t blocks = 1;            // M
  std::int64_t rounds_per_block = 1;  // E
  std::int64_t local_iters = 1;       // I

  std::int64_t iters_per_block() const { return rounds_per_block * local_iters; }  // K
  std::int64_t total_iterations() const { return cycles * blocks * iters_per_block(); }  // T
  std::int64_t total_rounds() const { return cycles * blocks * rounds_per_block; }

  void validate() const;  // throws std::invalid_argument
};

struct ScheduleCoordinate {
  std::int64_t cycle = 1;          // c in 1..C
  std::int64_t block = 1;          // m in 1..M
  std::int64_t iter_in_block = 1;  // k in 1..K

  friend bool operator==(const ScheduleCoordinate&, const ScheduleCoordinate&) = default;
};

/// Flat iteration index t in 1..T for a coordinate.
std::int64_t flat_index(const ScheduleCoordinate& coord, const CyclePlan& plan);

/// Inverse of flat_index.
ScheduleCoordinate coordinate_of(std::int64_t t, const CyclePlan& plan);

/// True iff iteration t ends a round (t divisible by local_iters).
bool is_communication_iteration(std::int64_t t, const CyclePlan& plan);

/// For a communication iteration t < T: true iff the round starting at t+1
/// falls in a different block visit (block index or cycle changes).
bool next_round_new_block(std::int64_t t, const CyclePlan& plan);

}  // namespace fedcyc
