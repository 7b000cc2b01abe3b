#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dprune/importance.hpp"
#include "dprune/model.hpp"

namespace dprune {

struct ModelStats {
  std::size_t param_count = 0;
  std::size_t macs = 0;             // one forward pass at seq_len tokens
  std::size_t memory_bytes = 0;     // param_count * 8 (float64 storage)
  double achieved_ratio = 0.0;      // removed / reference params
  int seq_len = 0;
};

// Copy of `model` with every selected group physically excised. Throws a
// plan-stale error if the plan was built against a different live shape and a
// contract error for overlapping groups or a model carrying adapters.
TransformerModel apply_plan(const TransformerModel& model, const PrunePlan& plan);

// Removes the listed indices along one axis (0 = rows/entries, 1 = columns).
Tensor excise(const Tensor& t, int axis, const std::vector<int>& sorted_indices);

// Shape/bookkeeping checks, followed by a probe forward when they pass.
// Returns human-readable violations; empty means consistent.
std::vector<std::string> validate_consistency(const TransformerModel& model);

std::size_t count_macs(const TransformerModel& model, int seq_len);
// reference_params = 0 reports achieved_ratio 0.
ModelStats count_stats(const TransformerModel& model, int seq_len = 64,
                       std::size_t reference_params = 0);

// (before - after) / before; exact for integer counts below 2^53.
double achieved_ratio(double params_before, double params_after);

}  // namespace dprune
