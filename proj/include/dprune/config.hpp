#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dprune/depgraph.hpp"
#include "dprune/importance.hpp"
#include "dprune/model.hpp"
#include "dprune/recovery.hpp"

namespace dprune {

// A byte range [begin, end) of a corpus file, as fractions of its length.
struct CorpusSlot {
  std::string path = "data/sample_corpus.txt";
  double begin = 0.0;
  double end = 1.0;
};

// Every pipeline knob. Text form is one `dotted.key = value` per line; `#`
// starts a comment. Unknown keys are rejected.
struct PipelineConfig {
  ModelConfig model;

  CorpusSlot base{"data/sample_corpus.txt", 0.0, 0.8};
  CorpusSlot calibration{"data/calibration_corpus.txt", 0.0, 1.0};
  CorpusSlot recovery{"data/sample_corpus.txt", 0.8, 0.9};
  CorpusSlot eval{"data/sample_corpus.txt", 0.9, 1.0};

  TrainHyper train{0.3, 2000, 4, 64, 0, 0.0};

  int calib_samples = 10;
  int calib_seq_len = 64;

  PruneUnit unit = PruneUnit::kBlock;
  double ratio = 0.2;
  Method method = Method::kParam1;
  Aggregation aggregation = Aggregation::kSum;
  FisherMode fisher = FisherMode::kMeanOfSquares;
  std::string protected_layers = "auto";  // auto | none | comma-separated layer ids

  int lora_rank = 4;
  double lora_alpha = 8.0;
  LoraHyper lora{0.1, 300, 4, 64, 0, 50, 64, true};

  int eval_seq_len = 64;
  int stats_seq_len = 64;

  std::vector<double> ablate_ratios{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};  // ratio sweep
  std::vector<double> ablate_method_ratios{0.2, 0.5};
  double ablate_study_ratio = 0.2;  // dependency and aggregation studies
  int ablate_recover_steps = 50;

  std::uint64_t seed_init = 1;
  std::uint64_t seed_data = 2;
  std::uint64_t seed_random = 3;

  std::string out_dir = "runs/default";

  static std::vector<std::string> keys();
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  // Applies `key=value` lines; throws a config error with the line number.
  void apply_text(const std::string& text);
  void load(const std::string& path);
  // Sets every named seed to `seed`.
  void set_all_seeds(std::uint64_t seed);

  // Throws a config error naming the first invalid field.
  void validate() const;
  std::vector<int> resolve_protected() const;

  // Canonical `key=value\n` lines in keys() order. out_dir is excluded so the
  // same experiment hashes identically wherever it is written.
  std::string canonical() const;
  std::string digest() const;        // FNV-1a 64 of canonical(), 16 hex digits
  std::string model_digest() const;  // FNV-1a 64 of the model.* lines only
};

std::uint64_t fnv1a64(const std::string& bytes);
std::string hex64(std::uint64_t v);

// Reads a corpus slot and returns its tokens; data error when empty.
std::vector<int> load_corpus(const CorpusSlot& slot);

std::string format_double(double v);

}  // namespace dprune
