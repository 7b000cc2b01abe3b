#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dprune/model.hpp"

namespace dprune {

// Every linear projection: per-layer wq/wk/wv/wo/w_gate/w_up/w_down and lm_head.
std::vector<std::string> linear_projection_names(const TransformerModel& model);

// Attaches adapters in place: P ~ N(0, 1/d_out) seeded per target, Q = 0, so
// the forward pass is unchanged. Empty targets means every linear projection.
// With clamp_rank, a target narrower than `rank` gets rank min(d_out, d_in)
// instead of raising (pruning can shrink a projection to a single row).
void attach_lora(TransformerModel& model, int rank, double alpha,
                 const std::vector<std::string>& targets, std::uint64_t seed,
                 bool clamp_rank = false);

std::size_t adapter_param_count(const TransformerModel& model);

struct LoraHyper {
  double lr = 0.1;
  int steps = 300;
  int batch = 4;
  int seq_len = 64;
  std::uint64_t seed = 0;
  int eval_every = 0;       // 0 disables the eval trace
  int eval_seq_len = 64;
  bool keep_best = true;    // restore adapters from the lowest eval loss
};

struct LoraTrace {
  std::vector<double> train_loss;     // per step
  std::vector<int> eval_step;         // steps after which eval ran (0 = before training)
  std::vector<double> eval_loss;
  int best_step = 0;
};

// SGD on adapter factors only; base weights are never written. When
// eval_every > 0 the held-out loss is recorded at step 0 and every
// eval_every steps (and at the final step).
LoraTrace train_lora(TransformerModel& model, std::span<const int> corpus,
                     const LoraHyper& hyper, std::span<const int> eval_tokens = {});

// W <- W + (alpha / r) * P * Q for every adapter, then drops the adapters.
void merge_lora(TransformerModel& model);

}  // namespace dprune
