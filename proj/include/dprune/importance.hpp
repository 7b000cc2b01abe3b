#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dprune/depgraph.hpp"
#include "dprune/model.hpp"

namespace dprune {

struct CalibrationSet {
  std::vector<std::vector<int>> sequences;  // each exactly seq_len tokens
  int seq_len = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return sequences.size(); }
};

// Draws `count` windows of `seq_len` tokens at seeded offsets.
CalibrationSet draw_calibration(std::span<const int> tokens, int count, int seq_len,
                                std::uint64_t seed);

// Second-order term of the parameter score: the mean over samples of the
// squared per-sample salience, or the square of the mean salience.
enum class FisherMode { kMeanOfSquares, kSquareOfMean };

struct ParamGradStats {
  std::vector<double> g_mean;   // (1/N) sum_n dL_n/dW
  std::vector<double> s2_mean;  // (1/N) sum_n (dL_n/dW * W)^2
};

struct GradStats {
  std::map<std::string, ParamGradStats> params;
  std::size_t samples = 0;

  const ParamGradStats& at(const std::string& name) const;
};

// Per-sample gradients of the next-token loss folded into running means.
// Identical sequences are evaluated once and weighted by multiplicity, and
// unique sequences are folded in sorted order, so the result does not depend
// on sample order.
GradStats accumulate_gradients(const TransformerModel& model, const CalibrationSet& calib);

enum class Method { kWeight, kParam1, kParam2, kParam12, kL2, kRandom };
enum class Aggregation { kSum, kProd, kMax, kLastOnly };
enum class ParamOrder { kFirst, kSecond, kBoth };

const char* method_name(Method m);
const char* aggregation_name(Aggregation a);
Method parse_method(const std::string& s);
Aggregation parse_aggregation(const std::string& s);
FisherMode parse_fisher_mode(const std::string& s);
const char* fisher_mode_name(FisherMode f);

// |sum_k g[k] * w[k]|
double weight_importance(std::span<const double> weight, std::span<const double> g_mean);

// s1 = g*w, s2 = 0.5 * second-order term; order 1 -> |s1|, 2 -> s2, 1+2 -> |s1 + s2|.
std::vector<double> parameter_importance(std::span<const double> weight,
                                         std::span<const double> g_mean,
                                         std::span<const double> s2_mean, ParamOrder order,
                                         FisherMode fisher = FisherMode::kMeanOfSquares);

// Visits the flat offsets a slice covers in a row-major tensor of `shape`.
template <typename Fn>
void for_each_slice_offset(const Slice& slice, const Shape& shape, Fn&& fn) {
  const std::size_t rows = shape.at(0);
  const std::size_t cols = shape.size() > 1 ? shape[1] : 1;
  for (int idx : slice.indices) {
    const auto i = static_cast<std::size_t>(idx);
    if (slice.axis == 0) {
      for (std::size_t c = 0; c < cols; ++c) fn(i * cols + c);
    } else {
      for (std::size_t r = 0; r < rows; ++r) fn(r * cols + i);
    }
  }
}

// Gathers the slice's weights (and matching entries of `aux`, when given).
std::vector<double> gather_slice(const Slice& slice, const Tensor& tensor);
std::vector<double> gather_slice(const Slice& slice, const Tensor& tensor,
                                 std::span<const double> aux);

// Importance of each member slice: weight-level (Weight) or the sum of
// per-parameter scores restricted to the slice (Param*). Always >= 0.
std::vector<double> member_importances(const DependencyGroup& group, const TransformerModel& model,
                                       const GradStats& stats, Method method,
                                       FisherMode fisher = FisherMode::kMeanOfSquares);

// Sum / Prod / Max over members, or the last executing member.
double group_importance(std::span<const double> member_scores, Aggregation aggregation);

// L2: Euclidean norm of all member weights. Random: seeded uniform in [0, 1).
double baseline_score(const DependencyGroup& group, const TransformerModel& model, Method method,
                      std::uint64_t seed);

// Signed first-order change sum_k g[k] * w[k] over every member slice.
double group_first_order(const DependencyGroup& group, const TransformerModel& model,
                         const GradStats& stats);

struct GroupScore {
  std::size_t group_id = 0;
  Method method = Method::kParam1;
  Aggregation aggregation = Aggregation::kSum;
  double value = 0.0;
};

struct ScoreOptions {
  Method method = Method::kParam1;
  Aggregation aggregation = Aggregation::kSum;
  FisherMode fisher = FisherMode::kMeanOfSquares;
  std::uint64_t random_seed = 0;
};

// stats may be null for L2 and Random.
std::vector<GroupScore> score_groups(const std::vector<DependencyGroup>& groups,
                                     const TransformerModel& model, const GradStats* stats,
                                     const ScoreOptions& options);

struct PrunePlan {
  PruneUnit unit = PruneUnit::kBlock;
  ArchShape shape;  // live shape the groups were discovered against
  double target_ratio = 0.0;
  std::vector<int> protected_layers;
  std::vector<DependencyGroup> groups;  // all candidate groups, discovery order
  std::vector<GroupScore> ranking;      // ascending score, ties by (layer, kind, index)
  std::vector<std::size_t> selected;    // ids into groups, selection order
  std::size_t predicted_delta = 0;
  std::size_t total_params = 0;

  double predicted_ratio() const {
    return total_params == 0 ? 0.0
                             : static_cast<double>(predicted_delta) /
                                   static_cast<double>(total_params);
  }
};

// Default protection: first and last decoder layer in Block mode, none in
// Channel mode.
std::vector<int> default_protected_layers(PruneUnit unit, int n_layers);

// Greedy lowest-score-first selection until removed/total >= ratio. Groups in
// protected layers are skipped, as are groups that would leave a layer
// without heads or hidden channels (or d_model below the widest layer's head
// count).
PrunePlan rank_and_select(const std::vector<DependencyGroup>& groups,
                          const std::vector<GroupScore>& scores, const ArchShape& shape,
                          PruneUnit unit, double ratio, const std::vector<int>& protected_layers);

// Loss probe that reuses the residual stream at layer boundaries: perturbing
// a group in layer l only recomputes layers l..L-1.
class LossOracle {
 public:
  LossOracle(const TransformerModel& model, const CalibrationSet& calib);

  double base_loss() const { return base_loss_; }
  // Mean calibration loss with the group's weights scaled by keep (0 removes it).
  double loss_with_group_scaled(const DependencyGroup& group, double keep);
  // |L(W) - L(W with the group zeroed)|
  double delta_loss(const DependencyGroup& group) {
    return std::abs(base_loss_ - loss_with_group_scaled(group, 0.0));
  }

 private:
  double loss_from(int first_layer);

  TransformerModel model_;
  const CalibrationSet* calib_;
  // cache_[s][l] = residual stream entering layer l for sequence s.
  std::vector<std::vector<Tensor>> cache_;
  double base_loss_ = 0.0;
};

double mean_calibration_loss(const TransformerModel& model, const CalibrationSet& calib);

// Zeroes the group in place, measures, and restores the original weights
// bit-exactly before returning.
double oracle_delta_loss(TransformerModel& model, const DependencyGroup& group,
                         const CalibrationSet& calib);

}  // namespace dprune
