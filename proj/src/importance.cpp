#include "dprune/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "dprune/error.hpp"
#include "dprune/rng.hpp"

namespace dprune {

CalibrationSet draw_calibration(std::span<const int> tokens, int count, int seq_len,
                                std::uint64_t seed) {
  if (count < 1) fail(ErrorCode::kData, "calibration set must contain at least one sample");
  if (seq_len < 2) fail(ErrorCode::kConfig, "calibration seq_len must be >= 2");
  CalibrationSet calib;
  calib.seq_len = seq_len;
  calib.seed = seed;
  // A window of seq_len tokens is seq_len - 1 predictions.
  calib.sequences = sample_windows(tokens, seq_len - 1, count, seed);
  return calib;
}

const ParamGradStats& GradStats::at(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) fail(ErrorCode::kContract, "no gradient statistics for '" + name + "'");
  return it->second;
}

GradStats accumulate_gradients(const TransformerModel& model, const CalibrationSet& calib) {
  if (calib.sequences.empty()) fail(ErrorCode::kData, "accumulate_gradients: empty calibration set");
  std::map<std::vector<int>, int> unique;
  for (const auto& s : calib.sequences) ++unique[s];

  TransformerModel work(model);
  work.adapters.clear();
  work.set_requires_grad(true);
  auto params = work.parameters();

  GradStats stats;
  stats.samples = calib.sequences.size();
  for (const auto& nt : params) {
    auto& p = stats.params[nt.name];
    p.g_mean.assign(nt.tensor.numel(), 0.0);
    p.s2_mean.assign(nt.tensor.numel(), 0.0);
  }
  for (const auto& [seq, multiplicity] : unique) {
    work.zero_grad();
    Tape tape;
    Tensor loss = next_token_loss(tape, work, seq);
    tape.backward(loss);
    const double m = static_cast<double>(multiplicity);
    for (const auto& nt : params) {
      auto& p = stats.params[nt.name];
      auto w = nt.tensor.data();
      auto g = nt.tensor.grad();
      if (g.empty()) continue;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double sal = g[k] * w[k];
        p.g_mean[k] += m * g[k];
        p.s2_mean[k] += m * sal * sal;
      }
    }
  }
  const double n = static_cast<double>(stats.samples);
  for (auto& [name, p] : stats.params) {
    for (auto& v : p.g_mean) v /= n;
    for (auto& v : p.s2_mean) v /= n;
  }
  return stats;
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kWeight: return "weight";
    case Method::kParam1: return "param1";
    case Method::kParam2: return "param2";
    case Method::kParam12: return "param12";
    case Method::kL2: return "l2";
    case Method::kRandom: return "random";
  }
  return "unknown";
}

const char* aggregation_name(Aggregation a) {
  switch (a) {
    case Aggregation::kSum: return "sum";
    case Aggregation::kProd: return "prod";
    case Aggregation::kMax: return "max";
    case Aggregation::kLastOnly: return "last";
  }
  return "unknown";
}

const char* fisher_mode_name(FisherMode f) {
  return f == FisherMode::kMeanOfSquares ? "mean_of_squares" : "square_of_mean";
}

Method parse_method(const std::string& s) {
  for (Method m : {Method::kWeight, Method::kParam1, Method::kParam2, Method::kParam12,
                   Method::kL2, Method::kRandom}) {
    if (s == method_name(m)) return m;
  }
  fail(ErrorCode::kConfig, "unknown importance method '" + s + "'");
}

Aggregation parse_aggregation(const std::string& s) {
  for (Aggregation a : {Aggregation::kSum, Aggregation::kProd, Aggregation::kMax,
                        Aggregation::kLastOnly}) {
    if (s == aggregation_name(a)) return a;
  }
  fail(ErrorCode::kConfig, "unknown aggregation '" + s + "'");
}

FisherMode parse_fisher_mode(const std::string& s) {
  if (s == "mean_of_squares") return FisherMode::kMeanOfSquares;
  if (s == "square_of_mean") return FisherMode::kSquareOfMean;
  fail(ErrorCode::kConfig, "unknown fisher mode '" + s + "'");
}

double weight_importance(std::span<const double> weight, std::span<const double> g_mean) {
  if (weight.size() != g_mean.size()) {
    fail(ErrorCode::kShape, "weight_importance: weight and gradient lengths differ");
  }
  double dot = 0.0;
  for (std::size_t k = 0; k < weight.size(); ++k) dot += g_mean[k] * weight[k];
  return std::abs(dot);
}

std::vector<double> parameter_importance(std::span<const double> weight,
                                         std::span<const double> g_mean,
                                         std::span<const double> s2_mean, ParamOrder order,
                                         FisherMode fisher) {
  if (weight.size() != g_mean.size() || weight.size() != s2_mean.size()) {
    fail(ErrorCode::kShape, "parameter_importance: statistic lengths differ from the weight");
  }
  if (order != ParamOrder::kFirst && order != ParamOrder::kSecond && order != ParamOrder::kBoth) {
    fail(ErrorCode::kContract, "parameter_importance: unknown order flag");
  }
  std::vector<double> out(weight.size());
  for (std::size_t k = 0; k < weight.size(); ++k) {
    const double s1 = g_mean[k] * weight[k];
    const double second = fisher == FisherMode::kMeanOfSquares ? s2_mean[k] : s1 * s1;
    const double s2 = 0.5 * second;
    switch (order) {
      case ParamOrder::kFirst: out[k] = std::abs(s1); break;
      case ParamOrder::kSecond: out[k] = s2; break;
      case ParamOrder::kBoth: out[k] = std::abs(s1 + s2); break;
    }
  }
  return out;
}

std::vector<double> gather_slice(const Slice& slice, const Tensor& tensor) {
  std::vector<double> out;
  auto d = tensor.data();
  for_each_slice_offset(slice, tensor.shape(), [&](std::size_t k) { out.push_back(d[k]); });
  return out;
}

std::vector<double> gather_slice(const Slice& slice, const Tensor& tensor,
                                 std::span<const double> aux) {
  std::vector<double> out;
  for_each_slice_offset(slice, tensor.shape(), [&](std::size_t k) { out.push_back(aux[k]); });
  return out;
}

std::vector<double> member_importances(const DependencyGroup& group, const TransformerModel& model,
                                       const GradStats& stats, Method method, FisherMode fisher) {
  std::vector<double> out;
  out.reserve(group.members.size());
  for (const auto& slice : group.members) {
    const Tensor w = model.parameter(slice.tensor);
    const auto& st = stats.at(slice.tensor);
    const auto wv = gather_slice(slice, w);
    const auto gv = gather_slice(slice, w, st.g_mean);
    if (method == Method::kWeight) {
      out.push_back(weight_importance(wv, gv));
      continue;
    }
    ParamOrder order;
    switch (method) {
      case Method::kParam1: order = ParamOrder::kFirst; break;
      case Method::kParam2: order = ParamOrder::kSecond; break;
      case Method::kParam12: order = ParamOrder::kBoth; break;
      default: fail(ErrorCode::kContract, std::string("member_importances: method ") +
                                              method_name(method) + " is not gradient based");
    }
    const auto sv = gather_slice(slice, w, st.s2_mean);
    const auto scores = parameter_importance(wv, gv, sv, order, fisher);
    out.push_back(std::accumulate(scores.begin(), scores.end(), 0.0));
  }
  return out;
}

double group_importance(std::span<const double> member_scores, Aggregation aggregation) {
  if (member_scores.empty()) fail(ErrorCode::kContract, "group_importance: empty group");
  switch (aggregation) {
    case Aggregation::kSum: return std::accumulate(member_scores.begin(), member_scores.end(), 0.0);
    case Aggregation::kProd:
      return std::accumulate(member_scores.begin(), member_scores.end(), 1.0,
                             std::multiplies<double>());
    case Aggregation::kMax: return *std::max_element(member_scores.begin(), member_scores.end());
    case Aggregation::kLastOnly: return member_scores.back();
  }
  fail(ErrorCode::kContract, "group_importance: unknown aggregation");
}

double baseline_score(const DependencyGroup& group, const TransformerModel& model, Method method,
                      std::uint64_t seed) {
  if (method == Method::kL2) {
    double ss = 0.0;
    for (const auto& slice : group.members) {
      for (double v : gather_slice(slice, model.parameter(slice.tensor))) ss += v * v;
    }
    return std::sqrt(ss);
  }
  if (method == Method::kRandom) {
    const std::uint64_t key = (static_cast<std::uint64_t>(group.layer + 1) << 40) ^
                              (static_cast<std::uint64_t>(group.kind) << 32) ^
                              static_cast<std::uint64_t>(group.index);
    SplitMix64 rng(derive_seed(seed, key));
    return rng.next_uniform();
  }
  fail(ErrorCode::kContract, std::string("baseline_score: ") + method_name(method) +
                                 " is not a baseline method");
}

double group_first_order(const DependencyGroup& group, const TransformerModel& model,
                         const GradStats& stats) {
  double total = 0.0;
  for (const auto& slice : group.members) {
    const Tensor w = model.parameter(slice.tensor);
    const auto wv = gather_slice(slice, w);
    const auto gv = gather_slice(slice, w, stats.at(slice.tensor).g_mean);
    for (std::size_t k = 0; k < wv.size(); ++k) total += gv[k] * wv[k];
  }
  return total;
}

std::vector<GroupScore> score_groups(const std::vector<DependencyGroup>& groups,
                                     const TransformerModel& model, const GradStats* stats,
                                     const ScoreOptions& options) {
  const bool baseline = options.method == Method::kL2 || options.method == Method::kRandom;
  if (!baseline && stats == nullptr) {
    fail(ErrorCode::kContract, "score_groups: gradient statistics required for " +
                                   std::string(method_name(options.method)));
  }
  std::vector<GroupScore> out;
  out.reserve(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    GroupScore s{i, options.method, options.aggregation, 0.0};
    if (baseline) {
      s.value = baseline_score(groups[i], model, options.method, options.random_seed);
    } else {
      const auto members = member_importances(groups[i], model, *stats, options.method,
                                               options.fisher);
      s.value = group_importance(members, options.aggregation);
    }
    out.push_back(s);
  }
  return out;
}

std::vector<int> default_protected_layers(PruneUnit unit, int n_layers) {
  if (unit == PruneUnit::kChannel || n_layers <= 0) return {};
  if (n_layers == 1) return {0};
  return {0, n_layers - 1};
}

PrunePlan rank_and_select(const std::vector<DependencyGroup>& groups,
                          const std::vector<GroupScore>& scores, const ArchShape& shape,
                          PruneUnit unit, double ratio, const std::vector<int>& protected_layers) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    fail(ErrorCode::kConfig, "pruning ratio must be in [0, 1), got " + std::to_string(ratio));
  }
  if (scores.size() != groups.size()) {
    fail(ErrorCode::kContract, "rank_and_select: one score per group required");
  }
  PrunePlan plan;
  plan.unit = unit;
  plan.shape = shape;
  plan.target_ratio = ratio;
  plan.protected_layers = protected_layers;
  plan.groups = groups;
  plan.total_params = shape.param_count();

  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](std::size_t i) {
    return std::tuple(scores[i].value, groups[i].layer, static_cast<int>(groups[i].kind),
                      groups[i].index);
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  for (auto i : order) plan.ranking.push_back(scores[i]);

  const std::set<int> guarded(protected_layers.begin(), protected_layers.end());
  std::vector<int> heads_left = shape.heads;
  std::vector<int> ff_left = shape.d_ff;
  int d_left = shape.d_model;
  const int widest = shape.heads.empty() ? 1 : *std::max_element(shape.heads.begin(), shape.heads.end());

  const double total = static_cast<double>(plan.total_params);
  auto reached = [&] { return static_cast<double>(plan.predicted_delta) / total >= ratio; };
  if (reached()) return plan;
  for (auto i : order) {
    const auto& g = groups[i];
    if (g.layer >= 0 && guarded.count(g.layer)) continue;
    const auto l = static_cast<std::size_t>(std::max(g.layer, 0));
    switch (g.kind) {
      case GroupKind::kAttentionHead:
        if (heads_left[l] <= 1) continue;
        --heads_left[l];
        break;
      case GroupKind::kMlpChannel:
        if (ff_left[l] <= 1) continue;
        --ff_left[l];
        break;
      case GroupKind::kEmbeddingChannel:
        if (d_left - 1 < std::max(widest, 1)) continue;
        --d_left;
        break;
    }
    plan.selected.push_back(i);
    plan.predicted_delta += group_param_delta(g, shape);
    if (reached()) return plan;
  }
  fail(ErrorCode::kSelection,
       "pruning ratio " + std::to_string(ratio) + " is unreachable; achievable maximum is " +
           std::to_string(static_cast<double>(plan.predicted_delta) / total));
}

// ---------------------------------------------------------------------------
// Loss oracle

namespace {

struct SavedSlices {
  std::vector<std::pair<Tensor, std::vector<std::pair<std::size_t, double>>>> entries;

  void restore() {
    for (auto& [tensor, values] : entries) {
      auto d = tensor.mutable_data();
      for (auto& [k, v] : values) d[k] = v;
    }
  }
};

SavedSlices scale_group(TransformerModel& model, const DependencyGroup& group, double keep) {
  SavedSlices saved;
  for (const auto& slice : group.members) {
    Tensor t = model.parameter(slice.tensor);
    std::vector<std::pair<std::size_t, double>> values;
    auto d = t.mutable_data();
    for_each_slice_offset(slice, t.shape(), [&](std::size_t k) {
      values.emplace_back(k, d[k]);
      d[k] *= keep;
    });
    saved.entries.emplace_back(t, std::move(values));
  }
  return saved;
}

}  // namespace

double mean_calibration_loss(const TransformerModel& model, const CalibrationSet& calib) {
  if (calib.sequences.empty()) fail(ErrorCode::kData, "empty calibration set");
  double total = 0.0;
  for (const auto& s : calib.sequences) total += next_token_loss_value(model, s);
  return total / static_cast<double>(calib.sequences.size());
}

double oracle_delta_loss(TransformerModel& model, const DependencyGroup& group,
                         const CalibrationSet& calib) {
  const double before = mean_calibration_loss(model, calib);
  SavedSlices saved = scale_group(model, group, 0.0);
  double after = 0.0;
  try {
    after = mean_calibration_loss(model, calib);
  } catch (...) {
    saved.restore();
    throw;
  }
  saved.restore();
  return std::abs(before - after);
}

LossOracle::LossOracle(const TransformerModel& model, const CalibrationSet& calib)
    : model_(model), calib_(&calib) {
  if (calib.sequences.empty()) fail(ErrorCode::kData, "empty calibration set");
  model_.set_requires_grad(false);
  Tape tape(false);
  for (const auto& s : calib.sequences) {
    std::span<const int> ids(s);
    std::vector<Tensor> per_layer;
    Tensor x = embed_tokens(tape, model_, ids.first(ids.size() - 1));
    for (int l = 0; l < model_.n_layers(); ++l) {
      per_layer.push_back(x);
      x = run_layer(tape, model_, l, x);
    }
    cache_.push_back(std::move(per_layer));
  }
  base_loss_ = loss_from(0);
}

double LossOracle::loss_from(int first_layer) {
  Tape tape(false);
  double total = 0.0;
  for (std::size_t s = 0; s < calib_->sequences.size(); ++s) {
    std::span<const int> ids(calib_->sequences[s]);
    Tensor x = first_layer < 0 ? embed_tokens(tape, model_, ids.first(ids.size() - 1))
                               : cache_[s][static_cast<std::size_t>(first_layer)];
    for (int l = std::max(first_layer, 0); l < model_.n_layers(); ++l) x = run_layer(tape, model_, l, x);
    total += cross_entropy(tape, output_logits(tape, model_, x), ids.subspan(1)).item();
  }
  return total / static_cast<double>(calib_->sequences.size());
}

double LossOracle::loss_with_group_scaled(const DependencyGroup& group, double keep) {
  SavedSlices saved = scale_group(model_, group, keep);
  double loss = 0.0;
  try {
    loss = loss_from(group.layer);
  } catch (...) {
    saved.restore();
    throw;
  }
  saved.restore();
  return loss;
}

}  // namespace dprune
