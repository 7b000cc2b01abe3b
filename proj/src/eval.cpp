#include "dprune/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

#include "dprune/error.hpp"

namespace dprune {

double perplexity(const TransformerModel& model, std::span<const int> tokens, int seq_len) {
  return std::exp(window_nll(model, tokens, seq_len).mean());
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

void check_pairs(std::span<const double> x, std::span<const double> y, const char* what) {
  if (x.size() != y.size()) fail(ErrorCode::kShape, std::string(what) + ": vectors differ in length");
  if (x.size() < 3) fail(ErrorCode::kContract, std::string(what) + ": need at least 3 pairs");
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  check_pairs(x, y, "spearman");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) fail(ErrorCode::kUndefined, "spearman: constant input");
  return sxy / std::sqrt(sxx * syy);
}

double kendall_tau(std::span<const double> x, std::span<const double> y) {
  check_pairs(x, y, "kendall_tau");
  double concordant = 0.0, discordant = 0.0, tie_x = 0.0, tie_y = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) continue;
      if (dx == 0.0) tie_x += 1.0;
      else if (dy == 0.0) tie_y += 1.0;
      else if ((dx > 0.0) == (dy > 0.0)) concordant += 1.0;
      else discordant += 1.0;
    }
  }
  const double denom = std::sqrt((concordant + discordant + tie_x) * (concordant + discordant + tie_y));
  if (denom == 0.0) fail(ErrorCode::kUndefined, "kendall_tau: constant input");
  return (concordant - discordant) / denom;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

EvalReport evaluate(const TransformerModel& model, const std::string& tag,
                    std::span<const int> tokens, int seq_len, int stats_seq_len,
                    std::size_t reference_params) {
  EvalReport r;
  r.tag = tag;
  const auto nll = window_nll(model, tokens, seq_len);
  r.ppl = std::exp(nll.mean());
  r.tokens = nll.tokens;
  r.stats = count_stats(model, stats_seq_len, reference_params);
  r.timestamp = utc_timestamp();
  return r;
}

PrunePlan build_plan(const TransformerModel& model, const std::vector<DependencyGroup>& groups,
                     const GradStats* stats, const ScoreOptions& options, PruneUnit unit,
                     double ratio, const std::vector<int>* protected_layers,
                     std::vector<int>* used_protection) {
  const ArchShape shape = ArchShape::from_model(model);
  const auto scores = score_groups(groups, model, stats, options);
  if (protected_layers) {
    if (used_protection) *used_protection = *protected_layers;
    return rank_and_select(groups, scores, shape, unit, ratio, *protected_layers);
  }
  const auto preferred = default_protected_layers(unit, model.n_layers());
  try {
    if (used_protection) *used_protection = preferred;
    return rank_and_select(groups, scores, shape, unit, ratio, preferred);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kSelection || preferred.empty()) throw;
  }
  if (used_protection) used_protection->clear();
  return rank_and_select(groups, scores, shape, unit, ratio, {});
}

TransformerModel dependency_free_mask(const TransformerModel& model, const PrunePlan& plan,
                                      const GradStats& stats) {
  std::map<std::pair<std::string, int>, std::size_t> budget;
  for (std::size_t id : plan.selected) {
    for (const auto& s : plan.groups.at(id).members) budget[{s.tensor, s.axis}] += s.indices.size();
  }
  TransformerModel out(model);
  out.adapters.clear();
  for (const auto& [key, count] : budget) {
    const auto& [name, axis] = key;
    Tensor w = out.parameter(name);
    const auto& g = stats.at(name).g_mean;
    const std::size_t rows = w.dim(0);
    const std::size_t cols = w.rank() > 1 ? w.dim(1) : 1;
    const std::size_t n = axis == 0 ? rows : cols;
    auto data = w.mutable_data();
    std::vector<double> score(n, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t k = r * cols + c;
        score[axis == 0 ? r : c] += std::abs(g[k] * data[k]);
      }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
    for (std::size_t i = 0; i < std::min(count, n); ++i) {
      const std::size_t idx = order[i];
      if (axis == 0) {
        for (std::size_t c = 0; c < cols; ++c) data[idx * cols + c] = 0.0;
      } else {
        for (std::size_t r = 0; r < rows; ++r) data[r * cols + idx] = 0.0;
      }
    }
  }
  return out;
}

std::vector<AblationRow> ablation_suite(const TransformerModel& base, const GradStats& stats,
                                        std::span<const int> eval_tokens,
                                        std::span<const int> recovery_tokens,
                                        const AblationConfig& config,
                                        const std::function<void(const AblationRow&)>& on_row) {
  const auto groups = discover_groups(build_graph(ArchShape::from_model(base)), config.unit);
  const std::size_t base_params = base.param_count();
  std::vector<AblationRow> rows;

  struct Outcome {
    double ppl = 0.0, recovered_ppl = 0.0, achieved = 0.0;
    std::vector<int> protection;
  };
  std::map<std::tuple<int, int, double, bool>, Outcome> memo;
  const std::vector<int> no_protection;

  auto recover = [&](TransformerModel m) {
    attach_lora(m, config.lora_rank, config.lora_alpha, {}, config.lora_seed, true);
    LoraHyper h = config.lora;
    h.steps = config.recover_steps;
    h.eval_every = 0;
    train_lora(m, recovery_tokens, h);
    merge_lora(m);
    return perplexity(m, eval_tokens, config.eval_seq_len);
  };
  auto emit = [&](AblationRow row) {
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  };
  auto structured = [&](Method method, Aggregation agg, double ratio,
                        bool unprotected = false) -> const Outcome& {
    const auto key = std::tuple(static_cast<int>(method), static_cast<int>(agg), ratio, unprotected);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    ScoreOptions opt{method, agg, config.fisher, config.random_seed};
    Outcome o;
    const PrunePlan plan = build_plan(base, groups, &stats, opt, config.unit, ratio,
                                      unprotected ? &no_protection : nullptr, &o.protection);
    TransformerModel pruned = apply_plan(base, plan);
    o.achieved = achieved_ratio(static_cast<double>(base_params),
                                static_cast<double>(pruned.param_count()));
    o.ppl = perplexity(pruned, eval_tokens, config.eval_seq_len);
    if (config.recover_steps > 0) o.recovered_ppl = recover(std::move(pruned));
    return memo.emplace(key, std::move(o)).first->second;
  };
  auto add_rows = [&](const std::string& study, const std::string& variant, Method method,
                      Aggregation agg, double ratio, const Outcome& o) {
    AblationRow row{study, variant, method, agg, ratio, o.achieved, o.protection, false, o.ppl};
    emit(row);
    if (config.recover_steps > 0) {
      row.recovered = true;
      row.ppl = o.recovered_ppl;
      emit(row);
    }
  };

  for (double ratio : config.method_ratios) {
    for (Method m : {Method::kL2, Method::kRandom, Method::kWeight, Method::kParam1,
                     Method::kParam2, Method::kParam12}) {
      add_rows("methods", method_name(m), m, Aggregation::kSum, ratio,
               structured(m, Aggregation::kSum, ratio));
    }
  }

  {
    const double ratio = config.dependency_ratio;
    const Outcome& dep = structured(Method::kParam1, Aggregation::kSum, ratio);
    add_rows("dependency", "dependency", Method::kParam1, Aggregation::kSum, ratio, dep);
    ScoreOptions opt{Method::kParam1, Aggregation::kSum, config.fisher, config.random_seed};
    const PrunePlan plan = build_plan(base, groups, &stats, opt, config.unit, ratio, nullptr);
    TransformerModel masked = dependency_free_mask(base, plan, stats);
    Outcome o;
    o.protection = dep.protection;
    o.achieved = static_cast<double>(plan.predicted_delta) / static_cast<double>(base_params);
    o.ppl = perplexity(masked, eval_tokens, config.eval_seq_len);
    if (config.recover_steps > 0) o.recovered_ppl = recover(std::move(masked));
    add_rows("dependency", "no_dependency", Method::kParam1, Aggregation::kSum, ratio, o);
  }

  for (Aggregation a : {Aggregation::kSum, Aggregation::kProd, Aggregation::kMax,
                        Aggregation::kLastOnly}) {
    add_rows("aggregation", aggregation_name(a), Method::kParam1, a, config.aggregation_ratio,
             structured(Method::kParam1, a, config.aggregation_ratio));
  }

  for (double ratio : config.sweep_ratios) {
    add_rows("sweep", method_name(config.sweep_method), config.sweep_method, Aggregation::kSum,
             ratio, structured(config.sweep_method, Aggregation::kSum, ratio, config.sweep_unprotected));
  }
  return rows;
}

namespace {

std::string join_layers(const std::vector<int>& xs) {
  if (xs.empty()) return "-";
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

}  // namespace

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-12s %-14s %-8s %7s %9s %-9s %-5s %12s\n", "study", "variant",
                "agg", "target", "achieved", "protected", "tuned", "ppl");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-12s %-14s %-8s %7.2f %9.4f %-9s %-5s %12.4f\n",
                  r.study.c_str(), r.variant.c_str(), aggregation_name(r.aggregation),
                  r.target_ratio, r.achieved_ratio, join_layers(r.protected_layers).c_str(),
                  r.recovered ? "yes" : "no", r.ppl);
    os << line;
  }
  return os.str();
}

std::string eval_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-10s %12s %10s %14s %14s %9s\n", "model", "ppl", "#params",
                "#MACs", "memory(B,f64)", "ratio");
  os << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof(line), "%-10s %12.4f %10zu %14zu %14zu %9.4f\n", r.tag.c_str(), r.ppl,
                  r.stats.param_count, r.stats.macs, r.stats.memory_bytes, r.stats.achieved_ratio);
    os << line;
  }
  return os.str();
}

}  // namespace dprune
