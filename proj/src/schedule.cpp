#include "fedcyc/schedule.hpp"

#include <stdexcept>
#include <string>

namespace fedcyc {

void CyclePlan::validate() const {
  if (cycles < 1 || blocks < 1 || rounds_per_block < 1 || local_iters < 1)
    throw std::invalid_argument("CyclePlan: cycles, blocks, rounds_per_block and local_iters must all be >= 1");
}

std::int64_t flat_index(const ScheduleCoordinate& coord, const CyclePlan& plan) {
  plan.validate();
  const std::int64_t k_per_block = plan.iters_per_block();
  if (coord.cycle < 1 || coord.cycle > plan.cycles || coord.block < 1 || coord.block > plan.blocks ||
      coord.iter_in_block < 1 || coord.iter_in_block > k_per_block)
    throw std::out_of_range("flat_index: coordinate outside the plan (cycle=" + std::to_string(coord.cycle) +
                            " block=" + std::to_string(coord.block) +
                            " iter=" + std::to_string(coord.iter_in_block) + ")");
  return (coord.cycle - 1) * plan.blocks * k_per_block + (coord.block - 1) * k_per_block + coord.iter_in_block;
}

ScheduleCoordinate coordinate_of(std::int64_t t, const CyclePlan& plan) {
  plan.validate();
  if (t < 1 || t > plan.total_iterations())
    throw std::out_of_range("coordinate_of: t=" + std::to_string(t) + " outside 1.." +
                            std::to_string(plan.total_iterations()));
  const std::int64_t k_per_block = plan.iters_per_block();
  const std::int64_t z = t - 1;
  ScheduleCoordinate c;
  c.iter_in_block = z % k_per_block + 1;
  c.block = (z / k_per_block) % plan.blocks + 1;
  c.cycle = z / (k_per_block * plan.blocks) + 1;
  return c;
}

bool is_communication_iteration(std::int64_t t, const CyclePlan& plan) {
  plan.validate();
  if (t < 1 || t > plan.total_iterations())
    throw std::out_of_range("is_communication_iteration: t outside 1..T");
  return t % plan.local_iters == 0;
}

bool next_round_new_block(std::int64_t t, const CyclePlan& plan) {
  if (!is_communication_iteration(t, plan))
    throw std::invalid_argument("next_round_new_block: t is not a communication iteration");
  if (t >= plan.total_iterations())
    throw std::invalid_argument("next_round_new_block: no round starts after t = T");
  const ScheduleCoordinate here = coordinate_of(t, plan);
  const ScheduleCoordinate next = coordinate_of(t + 1, plan);
  return here.block != next.block || here.cycle != next.cycle;
}

}  // namespace fedcyc
