// Acceptance run: one PASS/FAIL line per criterion. Trains the default toy
// model through two full pipeline runs (criterion 9 compares them) and reuses
// the first run's artifacts for the remaining criteria.
//
//   acceptance [work_dir]
//
// Exit status is 0 only when every criterion passes.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dprune/checkpoint.hpp"
#include "dprune/config.hpp"
#include "dprune/eval.hpp"
#include "dprune/pipeline.hpp"
#include "helpers.hpp"
#include "json.hpp"

using namespace dprune;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
  double seconds;
};

std::vector<Verdict> verdicts;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <typename Fn>
void criterion(int id, const std::string& name, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v{id, name, false, "", 0.0};
  try {
    std::tie(v.pass, v.detail) = fn();
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("exception: ") + e.what();
  }
  v.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("C%-2d %s  %s: %s  (%.1fs)\n", id, v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str(),
              v.seconds);
  std::fflush(stdout);
  verdicts.push_back(v);
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<json> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reports with the wall-clock fields removed.
std::string strip_timestamps(const fs::path& p) {
  std::string out;
  for (auto r : read_jsonl(p)) {
    r.erase("timestamp");
    out += r.dump() + "\n";
  }
  return out;
}

Tensor weighted(Tape& tape, const Tensor& y) {
  return sum(tape, mul(tape, y, testing::random_tensor(y.shape(), 99)));
}

// Criterion 1 on one parameter tensor: the k largest-magnitude analytic
// gradient entries plus k seeded random entries against central differences.
double check_param_gradient(TransformerModel& model, const std::string& name,
                            std::span<const int> ids, std::size_t k, std::uint64_t seed) {
  Tensor w = model.parameter(name);
  const std::vector<double> analytic(w.grad().begin(), w.grad().end());
  std::vector<std::size_t> order(analytic.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size())),
                    order.end(), [&](std::size_t a, std::size_t b) {
                      return std::abs(analytic[a]) > std::abs(analytic[b]);
                    });
  std::vector<std::size_t> probe(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size())));
  SplitMix64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) probe.push_back(rng.next_below(analytic.size()));
  double worst = 0.0;
  const double h = 1e-5;
  auto data = w.mutable_data();
  for (std::size_t i : probe) {
    const double orig = data[i];
    data[i] = orig + h;
    const double up = next_token_loss_value(model, ids);
    data[i] = orig - h;
    const double down = next_token_loss_value(model, ids);
    data[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

ModelConfig wide_config() {
  ModelConfig c;
  c.d_model = 12;
  c.n_heads = 3;
  c.d_ff = 10;
  c.n_layers = 3;
  c.max_seq = 8;
  return c;
}

// Returns the number of failed checks.
std::size_t check_discovery(const ModelConfig& c, std::string& detail) {
  std::size_t failures = 0;
  const auto model = init_model(c, 3);
  const auto shape = ArchShape::from_model(model);
  const auto graph = build_graph(shape);
  const auto ids = testing::random_ids(5, c.vocab_size, 4);
  for (const auto unit : {PruneUnit::kBlock, PruneUnit::kChannel}) {
    const auto groups = discover_groups(graph, unit);
    const std::size_t expected = unit == PruneUnit::kBlock
                                     ? static_cast<std::size_t>(c.n_layers * (c.n_heads + c.d_ff))
                                     : static_cast<std::size_t>(c.d_model);
    if (groups.size() != expected) ++failures;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      PrunePlan plan;
      plan.unit = unit;
      plan.shape = shape;
      plan.groups = groups;
      plan.selected = {i};
      plan.total_params = model.param_count();
      const auto pruned = apply_plan(model, plan);
      Tape tape(false);
      const bool ok = validate_consistency(pruned).empty() &&
                      model.param_count() - pruned.param_count() == group_param_delta(groups[i], shape) &&
                      forward(tape, pruned, ids).shape() == Shape{5, static_cast<std::size_t>(c.vocab_size)};
      if (!ok) ++failures;
    }
    detail += std::to_string(groups.size()) + (unit == PruneUnit::kBlock ? "B/" : "C ");
  }
  return failures;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "dprune_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  PipelineConfig cfg;  // defaults throughout
  PipelineConfig cfg_a = cfg, cfg_b = cfg;
  cfg_a.out_dir = (work / "run_a").string();
  cfg_b.out_dir = (work / "run_b").string();
  const fs::path a = cfg_a.out_dir, b = cfg_b.out_dir;

  std::printf("acceptance: full pipeline run A -> %s\n", a.c_str());
  std::fflush(stdout);
  auto t0 = std::chrono::steady_clock::now();
  run_subcommand("pipeline", cfg_a);
  const double pipeline_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("acceptance: run A took %.1fs\n", pipeline_seconds);
  std::fflush(stdout);

  const auto base = load_checkpoint((a / artifact::kBase).string());
  const auto eval_tokens = load_corpus(cfg.eval);
  const auto recovery_tokens = load_corpus(cfg.recovery);
  const auto calib_tokens = load_corpus(cfg.calibration);

  criterion(1, "gradient correctness", [&] {
    double ops = 0.0;
    auto x = testing::random_tensor({3, 4}, 1), w = testing::random_tensor({2, 4}, 2);
    auto p = testing::random_tensor({3, 3}, 3), q = testing::random_tensor({3, 3}, 4);
    auto v = testing::random_tensor({3}, 5), table = testing::random_tensor({5, 3}, 6);
    const std::vector<int> ids{4, 0, 4, 2}, targets{2, 0, 1};
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return weighted(t, matmul(t, p, q)); }, {p, q}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return weighted(t, linear(t, x, w)); }, {x, w}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return weighted(t, scale(t, mul(t, add(t, p, q), p), -1.5)); }, {p, q}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) {
      return weighted(t, transpose(t, concat_cols(t, {slice_cols(t, x, 1, 2), x})));
    }, {x}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return weighted(t, embedding(t, table, ids)); }, {table}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return weighted(t, rms_norm(t, p, v, 1e-5)); }, {p, v}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return weighted(t, swiglu(t, p, q)); }, {p, q}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return weighted(t, softmax(t, p, false)); }, {p}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return weighted(t, softmax(t, p, true)); }, {p}));
    ops = std::max(ops, testing::gradcheck([&](Tape& t) { return cross_entropy(t, p, targets); }, {p}));

    TransformerModel model = base;
    const std::vector<int> seq(eval_tokens.begin(), eval_tokens.begin() + 65);
    model.set_requires_grad(true);
    model.zero_grad();
    {
      Tape tape;
      tape.backward(next_token_loss(tape, model, seq));
    }
    double full = 0.0;
    std::uint64_t s = 0;
    for (const auto& np : model.parameters()) full = std::max(full, check_param_gradient(model, np.name, seq, 4, ++s));
    const bool pass = ops < 1e-5 && full < 1e-5;
    return std::pair{pass, "ops max rel err " + fmt("%.2e", ops) + ", full model " + fmt("%.2e", full) +
                               " (< 1e-5; 8 entries per tensor, h=1e-5)"};
  });

  criterion(2, "group discovery exactness", [&] {
    std::string detail;
    std::size_t failures = 0;
    for (const auto& c : {ModelConfig{}, testing::tiny_config(), wide_config()}) failures += check_discovery(c, detail);
    return std::pair{failures == 0, "groups " + detail + "for 3 configs; " + std::to_string(failures) +
                                        " failed excisions/counts"};
  });

  criterion(3, "Taylor vs oracle", [&] {
    json oracle;
    for (const auto& r : read_jsonl(a / artifact::kAblate)) {
      if (r.at("record") == "oracle") oracle = r;
    }
    const double rho = oracle.at("spearman").get<double>();
    const auto n = oracle.at("groups").get<std::size_t>();
    const auto within = oracle.at("perturbation_within").get<std::size_t>();
    const double frac = static_cast<double>(within) / static_cast<double>(n);
    return std::pair{rho >= 0.5 && frac >= 0.95,
                     "spearman " + fmt("%.4f", rho) + " (>= 0.5); perturbation ratio in [0.9,1.1] for " +
                         std::to_string(within) + "/" + std::to_string(n) + " = " + fmt("%.2f%%", 100 * frac) +
                         " (>= 95%)"};
  });

  // Criteria 4 and 5: one base model, three calibration / random-scorer seeds.
  std::vector<std::map<std::string, double>> seed_ppl;  // "study/variant@ratio" -> ppl, no recovery
  const std::vector<std::uint64_t> seeds{cfg.seed_data, cfg.seed_data + 10, cfg.seed_data + 20};
  {
    const auto t = std::chrono::steady_clock::now();
    for (auto seed : seeds) {
      const auto calib = draw_calibration(calib_tokens, cfg.calib_samples, cfg.calib_seq_len, seed);
      const auto stats = accumulate_gradients(base, calib);
      AblationConfig ac;
      ac.random_seed = seed;
      ac.sweep_ratios = {};
      ac.eval_seq_len = cfg.eval_seq_len;
      std::map<std::string, double> m;
      for (const auto& r : ablation_suite(base, stats, eval_tokens, recovery_tokens, ac)) {
        m[r.study + "/" + r.variant + "@" + fmt("%.1f", r.target_ratio)] = r.ppl;
      }
      seed_ppl.push_back(std::move(m));
    }
    std::printf("acceptance: 3-seed ablation took %.1fs\n",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count());
  }

  criterion(4, "dependency ablation direction", [&] {
    int wins = 0;
    std::string detail;
    for (const auto& m : seed_ppl) {
      const double dep = m.at("dependency/dependency@0.2"), free = m.at("dependency/no_dependency@0.2");
      wins += dep < free;
      detail += fmt("%.3f", dep) + "<" + fmt("%.3f", free) + " ";
    }
    return std::pair{wins == 3, std::to_string(wins) + "/3 seeds; " + detail};
  });

  criterion(5, "method ordering direction", [&] {
    int at50 = 0;
    std::string detail;
    for (const auto& m : seed_ppl) at50 += m.at("methods/param1@0.5") <= m.at("methods/l2@0.5");
    detail = "param1<=l2 at 50%: " + std::to_string(at50) + "/3; at 20% beats random or l2:";
    bool pass = at50 == 3;
    for (const char* method : {"weight", "param1", "param2", "param12"}) {
      int wins = 0;
      for (const auto& m : seed_ppl) {
        const double p = m.at(std::string("methods/") + method + "@0.2");
        wins += p < m.at("methods/random@0.2") || p < m.at("methods/l2@0.2");
      }
      pass = pass && wins >= 2;
      detail += std::string(" ") + method + " " + std::to_string(wins) + "/3";
    }
    detail += "; at 20% weight/random/l2:";
    for (const auto& m : seed_ppl) {
      detail += " " + fmt("%.3f", m.at("methods/weight@0.2")) + "/" + fmt("%.3f", m.at("methods/random@0.2")) +
                "/" + fmt("%.3f", m.at("methods/l2@0.2"));
    }
    return std::pair{pass, detail};
  });

  criterion(6, "recovery effect", [&] {
    std::map<std::string, double> ppl;
    for (const auto& r : read_jsonl(a / artifact::kEval)) ppl[r.at("tag")] = r.at("ppl").get<double>();
    const double gain = (ppl.at("pruned") - ppl.at("recovered")) / ppl.at("pruned");
    // Extended run: four times the default step budget, eval every 25 steps.
    TransformerModel model = load_checkpoint((a / artifact::kPruned).string());
    attach_lora(model, cfg.lora_rank, cfg.lora_alpha, {}, cfg.seed_init, true);
    LoraHyper h = cfg.lora;
    h.seed = cfg.seed_data;
    h.steps = 4 * cfg.lora.steps;
    h.eval_every = 25;
    h.eval_seq_len = cfg.eval_seq_len;
    const auto trace = train_lora(model, recovery_tokens, h, eval_tokens);
    const auto best = std::min_element(trace.eval_loss.begin(), trace.eval_loss.end());
    const int best_step = trace.eval_step[static_cast<std::size_t>(best - trace.eval_loss.begin())];
    const bool pass = gain >= 0.05 && best_step < h.steps;
    return std::pair{pass, "ppl " + fmt("%.4f", ppl.at("pruned")) + " -> " + fmt("%.4f", ppl.at("recovered")) +
                               " (" + fmt("%.1f%%", 100 * gain) + " >= 5%); extended " +
                               std::to_string(h.steps) + "-step run min eval loss at step " +
                               std::to_string(best_step) + " (final " +
                               fmt("%.4f", trace.eval_loss.back()) + " vs min " + fmt("%.4f", *best) + ")"};
  });

  criterion(7, "LoRA algebra", [&] {
    const auto pruned = load_checkpoint((a / artifact::kPruned).string());
    auto adapted = load_checkpoint((a / artifact::kAdapters).string());
    auto fresh = pruned;
    attach_lora(fresh, cfg.lora_rank, cfg.lora_alpha, {}, cfg.seed_init, true);
    bool identical = true;
    double worst = 0.0;
    std::vector<std::vector<double>> before;
    for (std::uint64_t s = 0; s < 32; ++s) {
      const auto ids = testing::random_ids(1 + (s * 7) % 64, cfg.model.vocab_size, 1000 + s);
      Tape t1(false), t2(false), t3(false);
      const auto y0 = forward(t1, pruned, ids), y1 = forward(t2, fresh, ids), y2 = forward(t3, adapted, ids);
      identical = identical && std::equal(y0.data().begin(), y0.data().end(), y1.data().begin());
      before.emplace_back(y2.data().begin(), y2.data().end());
    }
    merge_lora(adapted);
    for (std::uint64_t s = 0; s < 32; ++s) {
      const auto ids = testing::random_ids(1 + (s * 7) % 64, cfg.model.vocab_size, 1000 + s);
      Tape t(false);
      const auto y = forward(t, adapted, ids);
      worst = std::max(worst, testing::max_abs_diff(before[s], y.data()));
    }
    const auto merged = load_checkpoint((a / artifact::kMerged).string());
    const bool counts = merged.param_count() == pruned.param_count() && adapted.param_count() == pruned.param_count();
    return std::pair{identical && worst < 1e-9 && counts,
                     std::string("attach bit-identical: ") + (identical ? "yes" : "no") +
                         "; merge max abs diff " + fmt("%.2e", worst) + " (< 1e-9) on 32 probes; params " +
                         std::to_string(merged.param_count()) + " merged vs " +
                         std::to_string(pruned.param_count()) + " pruned"};
  });

  criterion(8, "accounting arithmetic", [&] {
    const double reference = achieved_ratio(6.74, 5.42);
    const auto pruned = load_checkpoint((a / artifact::kPruned).string());
    const auto stats = json::parse(slurp(a / artifact::kPruneStats));
    const double reported = stats.at("achieved_ratio").get<double>();
    const double recomputed = achieved_ratio(static_cast<double>(base.param_count()),
                                             static_cast<double>(pruned.param_count()));
    const bool formula = base.param_count() == cfg.model.analytic_param_count() &&
                         pruned.param_count() == ArchShape::from_model(pruned).param_count() &&
                         init_model(testing::tiny_config(), 1).param_count() ==
                             testing::tiny_config().analytic_param_count();
    const bool pass = std::abs(reference - 0.196) < 5e-4 && reported == recomputed && formula;
    return std::pair{pass, "(6.74-5.42)/6.74 = " + fmt("%.4f", reference) + "; reported ratio " +
                               fmt("%.6f", reported) + " == recomputed " + fmt("%.6f", recomputed) +
                               "; param counts match analytic formulas: " + (formula ? "yes" : "no")};
  });

  criterion(9, "determinism", [&] {
    std::printf("acceptance: full pipeline run B -> %s\n", b.c_str());
    std::fflush(stdout);
    run_subcommand("pipeline", cfg_b);
    std::vector<std::string> differ;
    for (const char* name : {artifact::kBase, artifact::kPruned, artifact::kAdapters, artifact::kMerged}) {
      if (slurp(a / name) != slurp(b / name)) differ.push_back(name);
    }
    for (const char* name : {artifact::kTrainTrace, artifact::kGroups, artifact::kScores, artifact::kRecoverTrace,
                             artifact::kEval, artifact::kAblate}) {
      if (strip_timestamps(a / name) != strip_timestamps(b / name)) differ.push_back(name);
    }
    for (const char* name : {artifact::kPlan, artifact::kPruneStats, artifact::kAblateSummary}) {
      if (slurp(a / name) != slurp(b / name)) differ.push_back(name);
    }
    // The written config differs only in its out_dir line.
    auto without_out_dir = [](const fs::path& p) {
      std::string out, line;
      std::ifstream in(p);
      while (std::getline(in, line)) {
        if (line.rfind("out_dir=", 0) != 0) out += line + "\n";
      }
      return out;
    };
    if (without_out_dir(a / artifact::kConfig) != without_out_dir(b / artifact::kConfig)) {
      differ.push_back(artifact::kConfig);
    }
    std::string detail = differ.empty() ? "4 checkpoints byte-identical, 10 reports identical (timestamps and out_dir aside)"
                                        : "differ:";
    for (const auto& d : differ) detail += " " + d;
    return std::pair{differ.empty(), detail};
  });

  criterion(10, "ratio sweep monotone trend", [&] {
    std::vector<double> ratios, ppl;
    for (const auto& r : read_jsonl(a / artifact::kAblate)) {
      if (r.at("record") == "ablation" && r.at("study") == "sweep" && !r.at("recovered").get<bool>()) {
        ratios.push_back(r.at("target_ratio").get<double>());
        ppl.push_back(r.at("ppl").get<double>());
      }
    }
    const double tau = kendall_tau(ratios, ppl);
    std::string detail = "kendall tau " + fmt("%.3f", tau) + " (>= 0.8) over";
    for (std::size_t i = 0; i < ratios.size(); ++i) detail += " " + fmt("%.1f", ratios[i]) + ":" + fmt("%.3f", ppl[i]);
    return std::pair{tau >= 0.8, detail};
  });

  std::size_t passed = 0;
  double total = pipeline_seconds;
  for (const auto& v : verdicts) {
    passed += v.pass;
    total += v.seconds;
  }
  std::printf("acceptance: %zu/%zu criteria passed in %.1fs; default pipeline %.1fs (< 600s: %s)\n", passed,
              verdicts.size(), total, pipeline_seconds, pipeline_seconds < 600 ? "yes" : "no");
  return passed == verdicts.size() ? 0 : 1;
}
