#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dprune/config.hpp"

namespace dprune {

// Subcommands in pipeline order, followed by "pipeline" itself.
const std::vector<std::string>& subcommand_names();

using LogFn = std::function<void(const std::string&)>;

struct RunResult {
  std::vector<std::string> artifacts;  // paths written, in order
};

// Validates the config, takes the output-directory lock and runs one
// subcommand. Nothing is created when validation fails. A missing input
// artifact raises a dependency error naming the subcommand that produces it.
RunResult run_subcommand(const std::string& name, const PipelineConfig& config,
                         const LogFn& log = {});

// Artifact file names inside the output directory.
namespace artifact {
inline constexpr const char* kBase = "base.dprn";
inline constexpr const char* kTrainTrace = "train_trace.jsonl";
inline constexpr const char* kGroups = "groups.jsonl";
inline constexpr const char* kScores = "scores.jsonl";
inline constexpr const char* kPlan = "plan.json";
inline constexpr const char* kPruned = "pruned.dprn";
inline constexpr const char* kPruneStats = "prune_stats.json";
inline constexpr const char* kAdapters = "adapters.dprn";
inline constexpr const char* kMerged = "merged.dprn";
inline constexpr const char* kRecoverTrace = "recover_trace.jsonl";
inline constexpr const char* kEval = "eval.jsonl";
inline constexpr const char* kEvalSummary = "eval_summary.txt";
inline constexpr const char* kAblate = "ablate.jsonl";
inline constexpr const char* kAblateSummary = "ablate_summary.txt";
inline constexpr const char* kConfig = "config.txt";
inline constexpr const char* kLock = ".lock";
}  // namespace artifact

}  // namespace dprune
