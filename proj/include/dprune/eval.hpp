#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dprune/importance.hpp"
#include "dprune/pruner.hpp"
#include "dprune/recovery.hpp"

namespace dprune {

// exp(mean next-token NLL) over non-overlapping windows of seq_len predictions.
double perplexity(const TransformerModel& model, std::span<const int> tokens, int seq_len);

// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> x);
// Spearman rho (Pearson correlation of average ranks). Needs >= 3 paired
// values; a constant vector raises an undefined-correlation error.
double spearman(std::span<const double> x, std::span<const double> y);
// Kendall tau-b.
double kendall_tau(std::span<const double> x, std::span<const double> y);

struct EvalReport {
  std::string tag;
  double ppl = 0.0;
  std::size_t tokens = 0;
  std::string config_digest;
  std::string model_digest;
  ModelStats stats;
  std::string timestamp;  // UTC, ISO 8601
};

EvalReport evaluate(const TransformerModel& model, const std::string& tag,
                    std::span<const int> tokens, int seq_len, int stats_seq_len,
                    std::size_t reference_params);

std::string utc_timestamp();

// Scores the groups and selects against `ratio`. Protected layers: when
// protected_layers is null the default set is tried first and dropped if the
// ratio is unreachable with it; `used_protection` reports what was applied.
PrunePlan build_plan(const TransformerModel& model, const std::vector<DependencyGroup>& groups,
                     const GradStats* stats, const ScoreOptions& options, PruneUnit unit,
                     double ratio, const std::vector<int>* protected_layers,
                     std::vector<int>* used_protection = nullptr);

// Dependency-free counterpart of a structured plan: for each (tensor, axis)
// the plan touches, the same number of rows/columns is zeroed, chosen by each
// slice's own first-order parameter score with no coupling to other tensors.
// The returned model keeps its shapes.
TransformerModel dependency_free_mask(const TransformerModel& model, const PrunePlan& plan,
                                      const GradStats& stats);

struct AblationConfig {
  PruneUnit unit = PruneUnit::kBlock;
  std::vector<double> method_ratios{0.2, 0.5};
  double dependency_ratio = 0.2;
  double aggregation_ratio = 0.2;
  std::vector<double> sweep_ratios{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  Method sweep_method = Method::kParam1;
  // The sweep runs without layer protection at every ratio so that the curve
  // is not bent by protection switching off once it makes a ratio unreachable.
  bool sweep_unprotected = true;
  FisherMode fisher = FisherMode::kMeanOfSquares;
  std::uint64_t random_seed = 0;
  int eval_seq_len = 64;
  // Recovery pass per variant; 0 skips the "recovered" rows.
  int recover_steps = 0;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  LoraHyper lora;
  std::uint64_t lora_seed = 0;
};

struct AblationRow {
  std::string study;    // methods | dependency | aggregation | sweep
  std::string variant;  // method name, "dependency"/"no_dependency", aggregation name
  Method method = Method::kParam1;
  Aggregation aggregation = Aggregation::kSum;
  double target_ratio = 0.0;
  double achieved_ratio = 0.0;
  std::vector<int> protected_layers;
  bool recovered = false;
  double ppl = 0.0;
};

// Runs every study against one base model and one set of gradient
// statistics. `on_row` (optional) sees each row as soon as it is computed.
std::vector<AblationRow> ablation_suite(const TransformerModel& base, const GradStats& stats,
                                        std::span<const int> eval_tokens,
                                        std::span<const int> recovery_tokens,
                                        const AblationConfig& config,
                                        const std::function<void(const AblationRow&)>& on_row = {});

// Fixed-width plain-text table of ablation rows.
std::string ablation_table(const std::vector<AblationRow>& rows);
std::string eval_table(const std::vector<EvalReport>& reports);

}  // namespace dprune
