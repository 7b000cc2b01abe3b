// Command-line driver over the C API.
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dprune/c_api.h"
#include "json.hpp"

namespace {

constexpr int kUsageExit = 64;

// The only thing written to stdout on failure: one JSON object on one line.
int report_error(const std::string& code, const std::string& message, int exit_code) {
  nlohmann::json j{{"status", "error"}, {"code", code}, {"message", message}, {"exit", exit_code}};
  std::printf("%s\n", j.dump().c_str());
  std::fflush(stdout);
  return exit_code;
}

int report_status(dp_status st) {
  return report_error(dp_status_name(st), dp_last_error(), static_cast<int>(st));
}

void log_line(const char* line, void*) {
  std::fprintf(stderr, "%s\n", line);
  std::fflush(stderr);
}

struct ConfigGuard {
  dp_config* cfg = nullptr;
  ~ConfigGuard() { dp_config_free(cfg); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dependency-aware structured pruning for a toy decoder-only transformer"};
  app.set_version_flag("--version", std::string(dp_version()));
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "override one key (key=value); repeatable")
      ->allow_extra_args(false);
  app.add_option("--out", out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", seed, "set every named seed (init, data, random)");

  const std::vector<std::pair<std::string, std::string>> commands{
      {"train-base", "train the base model from scratch"},
      {"discover", "find dependency groups in the base model"},
      {"estimate", "score every group on the calibration set"},
      {"plan", "select the groups to remove"},
      {"prune", "excise the planned groups"},
      {"recover", "train and merge low-rank adapters"},
      {"eval", "perplexity and size of base, pruned and recovered models"},
      {"ablate", "run the comparison studies on the base model"},
      {"pipeline", "run every stage in order"},
      {"config", "print the effective configuration"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), kUsageExit);
  }
  const std::string command = app.get_subcommands().front()->get_name();

  ConfigGuard guard;
  dp_status st = dp_config_new(&guard.cfg);
  if (st == DP_OK && !config_path.empty()) st = dp_config_load(guard.cfg, config_path.c_str());
  for (const auto& kv : overrides) {
    if (st != DP_OK) break;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      return report_error("config", "--set expects key=value, got '" + kv + "'",
                          static_cast<int>(DP_ERR_CONFIG));
    }
    st = dp_config_set(guard.cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
  }
  if (st == DP_OK && seed_opt->count() > 0) st = dp_config_set_seed(guard.cfg, seed);
  if (st == DP_OK && !out_dir.empty()) st = dp_config_set(guard.cfg, "out_dir", out_dir.c_str());
  if (st != DP_OK) return report_status(st);

  char digest[17] = {};
  if ((st = dp_config_digest(guard.cfg, digest)) != DP_OK) return report_status(st);

  if (command == "config") {
    if ((st = dp_config_validate(guard.cfg)) != DP_OK) return report_status(st);
    std::size_t needed = 0;
    dp_config_dump(guard.cfg, nullptr, 0, &needed);
    std::string text(needed, '\0');
    if ((st = dp_config_dump(guard.cfg, text.data(), text.size(), nullptr)) != DP_OK) {
      return report_status(st);
    }
    text.pop_back();
    std::printf("# config_digest %s\n%s", digest, text.c_str());
    return 0;
  }

  if ((st = dp_run(guard.cfg, command.c_str(), log_line, nullptr)) != DP_OK) {
    return report_status(st);
  }
  char dir[4096];
  dp_config_get(guard.cfg, "out_dir", dir, sizeof dir, nullptr);
  nlohmann::json ok{{"status", "ok"}, {"subcommand", command}, {"config_digest", digest},
                    {"out_dir", dir}};
  std::printf("%s\n", ok.dump().c_str());
  return 0;
}
