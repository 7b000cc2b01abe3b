#include "dprune/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dprune/checkpoint.hpp"
#include "dprune/error.hpp"
#include "dprune/eval.hpp"
#include "json.hpp"

namespace dprune {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& subcommand_names() {
  static const std::vector<std::string> names{"train-base", "discover", "estimate", "plan",
                                              "prune",      "recover",  "eval",     "ablate",
                                              "pipeline"};
  return names;
}

namespace {

// O_EXCL lock file; one writer per output directory.
class DirLock {
 public:
  explicit DirLock(fs::path path) : path_(std::move(path)) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST) {
        fail(ErrorCode::kLocked, path_.string() + " exists; another run owns this directory");
      }
      fail(ErrorCode::kIo, "cannot create " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

struct Context {
  const PipelineConfig& cfg;
  fs::path dir;
  std::string digest;
  std::string model_digest;
  LogFn log;
  RunResult* result;

  fs::path path(const char* name) const { return dir / name; }

  void say(const std::string& line) const {
    if (log) log(line);
  }

  Metadata meta(const std::string& stage) const {
    return {{"config_digest", digest}, {"model_digest", model_digest}, {"stage", stage}};
  }

  json record(const std::string& kind) const {
    json j;
    j["record"] = kind;
    j["config_digest"] = digest;
    return j;
  }

  void emit(const char* name, const std::string& text) const {
    write_file(path(name).string(), text);
    result->artifacts.push_back(path(name).string());
  }

  void emit_model(const char* name, const TransformerModel& model, const std::string& stage,
                  Metadata extra = {}) const {
    Metadata m = meta(stage);
    m.merge(extra);
    save_checkpoint(model, path(name).string(), m);
    result->artifacts.push_back(path(name).string());
  }

  void require(const char* name, const char* producer) const {
    if (!fs::exists(path(name))) {
      fail(ErrorCode::kDependency, "missing " + path(name).string() + "; run `" + producer +
                                       "` first");
    }
  }

  TransformerModel load_model(const char* name, const char* producer,
                              Metadata* meta_out = nullptr) const {
    require(name, producer);
    return load_checkpoint(path(name).string(), meta_out);
  }

  std::vector<json> load_records(const char* name, const char* producer) const {
    require(name, producer);
    std::ifstream in(path(name));
    std::vector<json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        out.push_back(json::parse(line));
      } catch (const json::exception& e) {
        fail(ErrorCode::kIntegrity, path(name).string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
    return out;
  }
};

std::string jsonl(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) out += r.dump() + "\n";
  return out;
}

json stats_json(const ModelStats& s) {
  return {{"param_count", s.param_count}, {"macs", s.macs}, {"memory_bytes", s.memory_bytes},
          {"seq_len", s.seq_len}};
}

json group_json(const DependencyGroup& g, std::size_t id, const ArchShape& shape) {
  json members = json::array();
  for (const auto& s : g.members) {
    members.push_back({{"tensor", s.tensor}, {"axis", s.axis}, {"indices", s.indices}});
  }
  return {{"id", id},
          {"kind", group_kind_name(g.kind)},
          {"layer", g.layer},
          {"index", g.index},
          {"param_delta", group_param_delta(g, shape)},
          {"members", members}};
}

std::vector<DependencyGroup> discover(const TransformerModel& model, PruneUnit unit) {
  return discover_groups(build_graph(ArchShape::from_model(model)), unit);
}

// Rediscovers the groups of `base` and checks them against groups.jsonl, so
// every later stage works on exactly the recorded set.
std::vector<DependencyGroup> load_groups(const Context& ctx, const TransformerModel& base) {
  const auto records = ctx.load_records(artifact::kGroups, "discover");
  auto groups = discover(base, ctx.cfg.unit);
  const ArchShape shape = ArchShape::from_model(base);
  bool same = records.size() == groups.size();
  for (std::size_t i = 0; same && i < groups.size(); ++i) {
    json r = records[i];
    r.erase("record");
    r.erase("config_digest");
    same = r == group_json(groups[i], i, shape);
  }
  if (!same) {
    fail(ErrorCode::kPlanStale, ctx.path(artifact::kGroups).string() +
                                    " does not match the base model; rerun `discover`");
  }
  return groups;
}

CalibrationSet calibration(const PipelineConfig& cfg) {
  return draw_calibration(load_corpus(cfg.calibration), cfg.calib_samples, cfg.calib_seq_len,
                          cfg.seed_data);
}

bool needs_gradients(Method m) { return m != Method::kL2 && m != Method::kRandom; }

// Explicit protection is applied as given; "auto" falls back to none when
// the default set makes the ratio unreachable.
PrunePlan select(const PipelineConfig& cfg, const std::vector<DependencyGroup>& groups,
                 const std::vector<GroupScore>& scores, const ArchShape& shape) {
  const auto preferred = cfg.resolve_protected();
  if (cfg.protected_layers != "auto" || preferred.empty()) {
    return rank_and_select(groups, scores, shape, cfg.unit, cfg.ratio, preferred);
  }
  try {
    return rank_and_select(groups, scores, shape, cfg.unit, cfg.ratio, preferred);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kSelection) throw;
  }
  return rank_and_select(groups, scores, shape, cfg.unit, cfg.ratio, {});
}

void stage_train_base(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto tokens = load_corpus(cfg.base);
  TransformerModel model = init_model(cfg.model, cfg.seed_init);
  TrainHyper hyper = cfg.train;
  hyper.seed = cfg.seed_data;
  ctx.say("train-base: " + std::to_string(hyper.steps) + " steps on " +
          std::to_string(tokens.size()) + " tokens");
  const auto trace = train_base(model, tokens, hyper);
  std::vector<json> records;
  for (std::size_t i = 0; i < trace.loss.size(); ++i) {
    json r = ctx.record("train_step");
    r["step"] = i + 1;
    r["loss"] = trace.loss[i];
    records.push_back(std::move(r));
  }
  ctx.emit_model(artifact::kBase, model, "train-base");
  ctx.emit(artifact::kTrainTrace, jsonl(records));
  if (!trace.loss.empty()) ctx.say("train-base: final loss " + format_double(trace.loss.back()));
}

void stage_discover(const Context& ctx) {
  const auto base = ctx.load_model(artifact::kBase, "train-base");
  const auto groups = discover(base, ctx.cfg.unit);
  const ArchShape shape = ArchShape::from_model(base);
  std::vector<json> records;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    json r = ctx.record("group");
    r.update(group_json(groups[i], i, shape));
    records.push_back(std::move(r));
  }
  ctx.emit(artifact::kGroups, jsonl(records));
  ctx.say("discover: " + std::to_string(groups.size()) + " " + prune_unit_name(ctx.cfg.unit) +
          " groups");
}

void stage_estimate(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto base = ctx.load_model(artifact::kBase, "train-base");
  const auto groups = load_groups(ctx, base);
  GradStats stats;
  if (needs_gradients(cfg.method)) {
    const auto calib = calibration(cfg);
    stats = accumulate_gradients(base, calib);
    ctx.say("estimate: " + std::to_string(calib.size()) + " calibration samples, loss " +
            format_double(mean_calibration_loss(base, calib)));
  }
  const auto scores = score_groups(groups, base, needs_gradients(cfg.method) ? &stats : nullptr,
                                   {cfg.method, cfg.aggregation, cfg.fisher, cfg.seed_random});
  std::vector<json> records;
  for (const auto& s : scores) {
    const auto& g = groups.at(s.group_id);
    json r = ctx.record("score");
    r["group_id"] = s.group_id;
    r["kind"] = group_kind_name(g.kind);
    r["layer"] = g.layer;
    r["index"] = g.index;
    r["method"] = method_name(s.method);
    r["aggregation"] = aggregation_name(s.aggregation);
    r["value"] = s.value;
    records.push_back(std::move(r));
  }
  ctx.emit(artifact::kScores, jsonl(records));
}

void stage_plan(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto base = ctx.load_model(artifact::kBase, "train-base");
  const auto groups = load_groups(ctx, base);
  const auto records = ctx.load_records(artifact::kScores, "estimate");
  if (records.size() != groups.size()) {
    fail(ErrorCode::kPlanStale, "scores.jsonl covers " + std::to_string(records.size()) +
                                    " groups, expected " + std::to_string(groups.size()));
  }
  std::vector<GroupScore> scores;
  for (const auto& r : records) {
    GroupScore s;
    s.group_id = r.at("group_id").get<std::size_t>();
    s.method = parse_method(r.at("method").get<std::string>());
    s.aggregation = parse_aggregation(r.at("aggregation").get<std::string>());
    s.value = r.at("value").get<double>();
    if (s.method != cfg.method || s.aggregation != cfg.aggregation) {
      fail(ErrorCode::kPlanStale, std::string("scores were computed with ") +
                                      method_name(s.method) + "/" + aggregation_name(s.aggregation) +
                                      "; rerun `estimate`");
    }
    scores.push_back(s);
  }
  const ArchShape shape = ArchShape::from_model(base);
  const PrunePlan plan = select(cfg, groups, scores, shape);
  json selected = json::array();
  for (std::size_t id : plan.selected) {
    const auto& g = groups[id];
    selected.push_back(
        {{"id", id}, {"kind", group_kind_name(g.kind)}, {"layer", g.layer}, {"index", g.index}});
  }
  json r = ctx.record("plan");
  r["model_digest"] = ctx.model_digest;
  r["unit"] = prune_unit_name(plan.unit);
  r["method"] = method_name(cfg.method);
  r["aggregation"] = aggregation_name(cfg.aggregation);
  r["target_ratio"] = plan.target_ratio;
  r["protected_layers"] = plan.protected_layers;
  r["selected"] = selected;
  r["predicted_delta"] = plan.predicted_delta;
  r["total_params"] = plan.total_params;
  r["predicted_ratio"] = plan.predicted_ratio();
  ctx.emit(artifact::kPlan, r.dump(2) + "\n");
  ctx.say("plan: " + std::to_string(plan.selected.size()) + " groups, predicted ratio " +
          format_double(plan.predicted_ratio()));
}

void stage_prune(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto base = ctx.load_model(artifact::kBase, "train-base");
  auto groups = load_groups(ctx, base);
  ctx.require(artifact::kPlan, "plan");
  json j;
  try {
    std::ifstream in(ctx.path(artifact::kPlan));
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::kIntegrity, ctx.path(artifact::kPlan).string() + ": " + e.what());
  }
  PrunePlan plan;
  plan.unit = cfg.unit;
  plan.shape = ArchShape::from_model(base);
  plan.target_ratio = j.at("target_ratio").get<double>();
  plan.protected_layers = j.at("protected_layers").get<std::vector<int>>();
  plan.total_params = base.param_count();
  for (const auto& s : j.at("selected")) {
    const auto id = s.at("id").get<std::size_t>();
    if (id >= groups.size()) fail(ErrorCode::kPlanStale, "plan selects unknown group " + std::to_string(id));
    plan.selected.push_back(id);
    plan.predicted_delta += group_param_delta(groups[id], plan.shape);
  }
  if (plan.predicted_delta != j.at("predicted_delta").get<std::size_t>() ||
      plan.total_params != j.at("total_params").get<std::size_t>()) {
    fail(ErrorCode::kPlanStale, "plan.json does not match the base model; rerun `plan`");
  }
  plan.groups = std::move(groups);

  const TransformerModel pruned = apply_plan(base, plan);
  const auto violations = validate_consistency(pruned);
  if (!violations.empty()) fail(ErrorCode::kContract, "pruned model inconsistent: " + violations.front());

  const ModelStats before = count_stats(base, cfg.stats_seq_len, base.param_count());
  const ModelStats after = count_stats(pruned, cfg.stats_seq_len, base.param_count());
  if (after.param_count + plan.predicted_delta != before.param_count) {
    fail(ErrorCode::kContract, "removed parameters differ from the plan's predicted delta");
  }
  ctx.emit_model(artifact::kPruned, pruned, "prune",
                 {{"achieved_ratio", format_double(after.achieved_ratio)},
                  {"reference_params", std::to_string(before.param_count)}});
  json r = ctx.record("prune_stats");
  r["before"] = stats_json(before);
  r["after"] = stats_json(after);
  r["target_ratio"] = plan.target_ratio;
  r["predicted_ratio"] = plan.predicted_ratio();
  r["achieved_ratio"] = after.achieved_ratio;
  ctx.emit(artifact::kPruneStats, r.dump(2) + "\n");
  ctx.say("prune: " + std::to_string(before.param_count) + " -> " +
          std::to_string(after.param_count) + " params (achieved " +
          format_double(after.achieved_ratio) + ")");
}

void stage_recover(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  Metadata pruned_meta;
  TransformerModel model = ctx.load_model(artifact::kPruned, "prune", &pruned_meta);
  const auto train_tokens = load_corpus(cfg.recovery);
  const auto eval_tokens = load_corpus(cfg.eval);
  attach_lora(model, cfg.lora_rank, cfg.lora_alpha, {}, cfg.seed_init, true);
  LoraHyper hyper = cfg.lora;
  hyper.seed = cfg.seed_data;
  hyper.eval_seq_len = cfg.eval_seq_len;
  ctx.say("recover: " + std::to_string(adapter_param_count(model)) + " adapter params, " +
          std::to_string(hyper.steps) + " steps");
  const LoraTrace trace = train_lora(model, train_tokens, hyper, eval_tokens);

  std::vector<json> records;
  for (std::size_t i = 0; i < trace.train_loss.size(); ++i) {
    json r = ctx.record("recover_step");
    r["step"] = i + 1;
    r["train_loss"] = trace.train_loss[i];
    records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < trace.eval_step.size(); ++i) {
    json r = ctx.record("recover_eval");
    r["step"] = trace.eval_step[i];
    r["eval_loss"] = trace.eval_loss[i];
    records.push_back(std::move(r));
  }
  json summary = ctx.record("recover_summary");
  summary["best_step"] = trace.best_step;
  summary["adapter_params"] = adapter_param_count(model);
  records.push_back(std::move(summary));

  Metadata keep;
  if (auto it = pruned_meta.find("reference_params"); it != pruned_meta.end()) keep.insert(*it);
  ctx.emit_model(artifact::kAdapters, model, "recover", keep);
  merge_lora(model);
  ctx.emit_model(artifact::kMerged, model, "recover", keep);
  ctx.emit(artifact::kRecoverTrace, jsonl(records));
  ctx.say("recover: best eval step " + std::to_string(trace.best_step));
}

void stage_eval(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  struct Input {
    const char* file;
    const char* producer;
    const char* tag;
  };
  const Input inputs[] = {{artifact::kBase, "train-base", "base"},
                          {artifact::kPruned, "prune", "pruned"},
                          {artifact::kMerged, "recover", "recovered"}};
  std::vector<TransformerModel> models;
  for (const auto& in : inputs) {
    Metadata meta;
    models.push_back(ctx.load_model(in.file, in.producer, &meta));
    const auto it = meta.find("model_digest");
    const std::string found = it == meta.end() ? "(none)" : it->second;
    if (found != ctx.model_digest) {
      fail(ErrorCode::kConfig, std::string(in.file) + " has model config digest " + found +
                                   ", expected " + ctx.model_digest +
                                   "; refusing to compare models of different configs");
    }
  }
  const auto tokens = load_corpus(cfg.eval);
  const std::size_t reference = models.front().param_count();
  std::vector<EvalReport> reports;
  std::vector<json> records;
  for (std::size_t i = 0; i < models.size(); ++i) {
    EvalReport rep = evaluate(models[i], inputs[i].tag, tokens, cfg.eval_seq_len,
                              cfg.stats_seq_len, reference);
    rep.config_digest = ctx.digest;
    rep.model_digest = ctx.model_digest;
    json r = ctx.record("eval");
    r["tag"] = rep.tag;
    r["ppl"] = rep.ppl;
    r["tokens"] = rep.tokens;
    r["model_digest"] = rep.model_digest;
    r["stats"] = stats_json(rep.stats);
    r["achieved_ratio"] = rep.stats.achieved_ratio;
    r["timestamp"] = rep.timestamp;
    records.push_back(std::move(r));
    ctx.say("eval: " + rep.tag + " ppl " + format_double(rep.ppl));
    reports.push_back(std::move(rep));
  }
  ctx.emit(artifact::kEval, jsonl(records));
  ctx.emit(artifact::kEvalSummary, eval_table(reports));
}

void stage_ablate(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto base = ctx.load_model(artifact::kBase, "train-base");
  const auto eval_tokens = load_corpus(cfg.eval);
  const auto recovery_tokens = load_corpus(cfg.recovery);
  const auto calib = calibration(cfg);
  const GradStats stats = accumulate_gradients(base, calib);
  std::vector<json> records;

  // Estimated Param1/Sum scores against the measured loss change of removing
  // each group, plus the small-perturbation check at keep = 0.99.
  const auto groups = discover(base, cfg.unit);
  const auto scores = score_groups(groups, base, &stats,
                                   {Method::kParam1, Aggregation::kSum, cfg.fisher, cfg.seed_random});
  LossOracle oracle(base, calib);
  std::vector<double> est, measured;
  std::size_t within = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const double delta = oracle.delta_loss(groups[i]);
    const double first_order = group_first_order(groups[i], base, stats);
    const double perturbed = oracle.loss_with_group_scaled(groups[i], 0.99) - oracle.base_loss();
    const double ratio = (-0.01 * first_order) / perturbed;
    if (ratio >= 0.9 && ratio <= 1.1) ++within;
    est.push_back(scores[i].value);
    measured.push_back(delta);
    json r = ctx.record("oracle_group");
    r["group_id"] = i;
    r["kind"] = group_kind_name(groups[i].kind);
    r["layer"] = groups[i].layer;
    r["index"] = groups[i].index;
    r["estimate"] = scores[i].value;
    r["oracle_delta"] = delta;
    r["perturbation_ratio"] = ratio;
    records.push_back(std::move(r));
  }
  json agreement = ctx.record("oracle");
  agreement["groups"] = groups.size();
  agreement["spearman"] = spearman(est, measured);
  agreement["perturbation_within"] = within;
  records.push_back(agreement);
  ctx.say("ablate: oracle spearman " + format_double(agreement["spearman"].get<double>()) + ", " +
          std::to_string(within) + "/" + std::to_string(groups.size()) +
          " within the perturbation band");

  AblationConfig ac;
  ac.unit = cfg.unit;
  ac.sweep_ratios = cfg.ablate_ratios;
  ac.method_ratios = cfg.ablate_method_ratios;
  ac.dependency_ratio = cfg.ablate_study_ratio;
  ac.aggregation_ratio = cfg.ablate_study_ratio;
  ac.fisher = cfg.fisher;
  ac.random_seed = cfg.seed_random;
  ac.eval_seq_len = cfg.eval_seq_len;
  ac.recover_steps = cfg.ablate_recover_steps;
  ac.lora_rank = cfg.lora_rank;
  ac.lora_alpha = cfg.lora_alpha;
  ac.lora = cfg.lora;
  ac.lora.seed = cfg.seed_data;
  ac.lora.eval_every = 0;
  ac.lora_seed = cfg.seed_init;
  const auto rows = ablation_suite(base, stats, eval_tokens, recovery_tokens, ac,
                                   [&](const AblationRow& row) {
                                     ctx.say("ablate: " + row.study + " " + row.variant + " @" +
                                             format_double(row.target_ratio) +
                                             (row.recovered ? " tuned" : "") + " ppl " +
                                             format_double(row.ppl));
                                   });
  for (const auto& row : rows) {
    json r = ctx.record("ablation");
    r["study"] = row.study;
    r["variant"] = row.variant;
    r["method"] = method_name(row.method);
    r["aggregation"] = aggregation_name(row.aggregation);
    r["target_ratio"] = row.target_ratio;
    r["achieved_ratio"] = row.achieved_ratio;
    r["protected_layers"] = row.protected_layers;
    r["recovered"] = row.recovered;
    r["ppl"] = row.ppl;
    records.push_back(std::move(r));
  }
  ctx.emit(artifact::kAblate, jsonl(records));
  ctx.emit(artifact::kAblateSummary, ablation_table(rows));
}

using StageFn = void (*)(const Context&);

StageFn stage_fn(const std::string& name) {
  if (name == "train-base") return stage_train_base;
  if (name == "discover") return stage_discover;
  if (name == "estimate") return stage_estimate;
  if (name == "plan") return stage_plan;
  if (name == "prune") return stage_prune;
  if (name == "recover") return stage_recover;
  if (name == "eval") return stage_eval;
  if (name == "ablate") return stage_ablate;
  return nullptr;
}

}  // namespace

RunResult run_subcommand(const std::string& name, const PipelineConfig& config, const LogFn& log) {
  const bool all = name == "pipeline";
  if (!all && !stage_fn(name)) fail(ErrorCode::kConfig, "unknown subcommand '" + name + "'");
  config.validate();

  const fs::path dir(config.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  DirLock lock(dir / artifact::kLock);

  RunResult result;
  Context ctx{config, dir, config.digest(), config.model_digest(), log, &result};
  ctx.emit(artifact::kConfig, "# config_digest " + ctx.digest + "\n" + config.canonical() +
                                  "out_dir=" + config.out_dir + "\n");
  if (all) {
    for (const auto& stage : subcommand_names()) {
      if (stage == "pipeline") break;
      stage_fn(stage)(ctx);
    }
  } else {
    stage_fn(name)(ctx);
  }
  return result;
}

}  // namespace dprune
