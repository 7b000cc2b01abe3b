#include "dprune/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "dprune/error.hpp"

namespace dprune {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    fail(ErrorCode::kConfig, key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  int base = 10;
  std::size_t skip = 0;
  if (v.size() > 2 && v[0] == '0' && (v[1] == 'x' || v[1] == 'X')) base = 16, skip = 2;
  auto res = std::from_chars(v.data() + skip, v.data() + v.size(), out, base);
  if (v.size() == skip || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    fail(ErrorCode::kConfig, key + ": expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

int parse_i32(const std::string& key, const std::string& v) {
  const long long x = parse_int(key, v);
  if (x < -2147483648LL || x > 2147483647LL) fail(ErrorCode::kConfig, key + ": out of range");
  return static_cast<int>(x);
}

double parse_f64(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    fail(ErrorCode::kConfig, key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCode::kConfig, key + ": expected true or false, got '" + v + "'");
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_f64(key, trim(item)));
  return out;
}

std::string join(const std::vector<double>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + format_double(xs[i]);
  return s;
}

struct Field {
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
};

#define INT_FIELD(KEY, MEMBER)                                                          \
  {KEY,                                                                                 \
   {[](const PipelineConfig& c) { return std::to_string(c.MEMBER); },                  \
    [](PipelineConfig& c, const std::string& k, const std::string& v) { c.MEMBER = parse_i32(k, v); }}}
#define U64_FIELD(KEY, MEMBER)                                                          \
  {KEY,                                                                                 \
   {[](const PipelineConfig& c) { return std::to_string(c.MEMBER); },                  \
    [](PipelineConfig& c, const std::string& k, const std::string& v) { c.MEMBER = parse_u64(k, v); }}}
#define F64_FIELD(KEY, MEMBER)                                                          \
  {KEY,                                                                                 \
   {[](const PipelineConfig& c) { return format_double(c.MEMBER); },                    \
    [](PipelineConfig& c, const std::string& k, const std::string& v) { c.MEMBER = parse_f64(k, v); }}}
#define STR_FIELD(KEY, MEMBER)                                                          \
  {KEY,                                                                                 \
   {[](const PipelineConfig& c) { return c.MEMBER; },                                   \
    [](PipelineConfig& c, const std::string&, const std::string& v) { c.MEMBER = v; }}}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      INT_FIELD("model.vocab_size", model.vocab_size),
      INT_FIELD("model.d_model", model.d_model),
      INT_FIELD("model.n_heads", model.n_heads),
      INT_FIELD("model.d_ff", model.d_ff),
      INT_FIELD("model.n_layers", model.n_layers),
      INT_FIELD("model.max_seq", model.max_seq),
      F64_FIELD("model.norm_eps", model.norm_eps),
      F64_FIELD("model.proj_init_std", model.proj_init_std),
      STR_FIELD("corpus.base.path", base.path),
      F64_FIELD("corpus.base.begin", base.begin),
      F64_FIELD("corpus.base.end", base.end),
      STR_FIELD("corpus.calibration.path", calibration.path),
      F64_FIELD("corpus.calibration.begin", calibration.begin),
      F64_FIELD("corpus.calibration.end", calibration.end),
      STR_FIELD("corpus.recovery.path", recovery.path),
      F64_FIELD("corpus.recovery.begin", recovery.begin),
      F64_FIELD("corpus.recovery.end", recovery.end),
      STR_FIELD("corpus.eval.path", eval.path),
      F64_FIELD("corpus.eval.begin", eval.begin),
      F64_FIELD("corpus.eval.end", eval.end),
      F64_FIELD("train.lr", train.lr),
      INT_FIELD("train.steps", train.steps),
      INT_FIELD("train.batch", train.batch),
      INT_FIELD("train.seq_len", train.seq_len),
      F64_FIELD("train.clip_norm", train.clip_norm),
      INT_FIELD("calib.samples", calib_samples),
      INT_FIELD("calib.seq_len", calib_seq_len),
      {"prune.unit",
       {[](const PipelineConfig& c) { return std::string(prune_unit_name(c.unit)); },
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          if (v == "block") c.unit = PruneUnit::kBlock;
          else if (v == "channel") c.unit = PruneUnit::kChannel;
          else fail(ErrorCode::kConfig, k + ": expected block or channel, got '" + v + "'");
        }}},
      F64_FIELD("prune.ratio", ratio),
      {"prune.method",
       {[](const PipelineConfig& c) { return std::string(method_name(c.method)); },
        [](PipelineConfig& c, const std::string&, const std::string& v) { c.method = parse_method(v); }}},
      {"prune.aggregation",
       {[](const PipelineConfig& c) { return std::string(aggregation_name(c.aggregation)); },
        [](PipelineConfig& c, const std::string&, const std::string& v) {
          c.aggregation = parse_aggregation(v);
        }}},
      {"prune.fisher",
       {[](const PipelineConfig& c) { return std::string(fisher_mode_name(c.fisher)); },
        [](PipelineConfig& c, const std::string&, const std::string& v) { c.fisher = parse_fisher_mode(v); }}},
      STR_FIELD("prune.protected", protected_layers),
      INT_FIELD("recover.rank", lora_rank),
      F64_FIELD("recover.alpha", lora_alpha),
      F64_FIELD("recover.lr", lora.lr),
      INT_FIELD("recover.steps", lora.steps),
      INT_FIELD("recover.batch", lora.batch),
      INT_FIELD("recover.seq_len", lora.seq_len),
      INT_FIELD("recover.eval_every", lora.eval_every),
      {"recover.keep_best",
       {[](const PipelineConfig& c) { return std::string(c.lora.keep_best ? "true" : "false"); },
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          c.lora.keep_best = parse_bool(k, v);
        }}},
      INT_FIELD("eval.seq_len", eval_seq_len),
      INT_FIELD("eval.stats_seq_len", stats_seq_len),
      {"ablate.ratios",
       {[](const PipelineConfig& c) { return join(c.ablate_ratios); },
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          c.ablate_ratios = parse_list(k, v);
        }}},
      {"ablate.method_ratios",
       {[](const PipelineConfig& c) { return join(c.ablate_method_ratios); },
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          c.ablate_method_ratios = parse_list(k, v);
        }}},
      F64_FIELD("ablate.study_ratio", ablate_study_ratio),
      INT_FIELD("ablate.recover_steps", ablate_recover_steps),
      U64_FIELD("seed.init", seed_init),
      U64_FIELD("seed.data", seed_data),
      U64_FIELD("seed.random", seed_random),
      STR_FIELD("out_dir", out_dir),
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  fail(ErrorCode::kConfig, "unknown config key '" + key + "'");
}

}  // namespace

std::vector<std::string> PipelineConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : fields()) out.push_back(k);
  return out;
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  field(key).set(*this, key, trim(value));
}

std::string PipelineConfig::get(const std::string& key) const { return field(key).get(*this); }

void PipelineConfig::apply_text(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::kConfig, "line " + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const Error& e) {
      fail(e.code(), "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void PipelineConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  apply_text(buf.str());
}

void PipelineConfig::set_all_seeds(std::uint64_t seed) {
  seed_init = seed;
  seed_data = seed;
  seed_random = seed;
}

void PipelineConfig::validate() const {
  model.validate();
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) fail(ErrorCode::kConfig, msg);
  };
  for (const auto* slot : {&base, &calibration, &recovery, &eval}) {
    require(!slot->path.empty(), "corpus path must not be empty");
    require(slot->begin >= 0.0 && slot->begin < slot->end && slot->end <= 1.0,
            "corpus range must satisfy 0 <= begin < end <= 1");
  }
  require(train.lr > 0.0, "train.lr must be > 0");
  require(train.steps >= 0, "train.steps must be >= 0");
  require(train.clip_norm >= 0.0, "train.clip_norm must be >= 0");
  require(train.batch >= 1, "train.batch must be >= 1");
  require(train.seq_len >= 1 && train.seq_len <= model.max_seq, "train.seq_len must be in [1, max_seq]");
  require(calib_samples >= 1, "calib.samples must be >= 1");
  require(calib_seq_len >= 2 && calib_seq_len <= model.max_seq + 1,
          "calib.seq_len must be in [2, max_seq + 1]");
  require(ratio >= 0.0 && ratio < 1.0, "prune.ratio must be in [0, 1), got " + format_double(ratio));
  (void)resolve_protected();
  require(lora_rank >= 1, "recover.rank must be >= 1");
  require(lora_alpha > 0.0, "recover.alpha must be > 0");
  require(lora.lr > 0.0, "recover.lr must be > 0");
  require(lora.steps >= 0, "recover.steps must be >= 0");
  require(lora.batch >= 1, "recover.batch must be >= 1");
  require(lora.seq_len >= 1 && lora.seq_len <= model.max_seq, "recover.seq_len must be in [1, max_seq]");
  require(lora.eval_every >= 0, "recover.eval_every must be >= 0");
  require(eval_seq_len >= 1 && eval_seq_len <= model.max_seq, "eval.seq_len must be in [1, max_seq]");
  require(stats_seq_len >= 1, "eval.stats_seq_len must be >= 1");
  require(!ablate_ratios.empty(), "ablate.ratios must not be empty");
  for (double r : ablate_ratios) require(r >= 0.0 && r < 1.0, "ablate.ratios entries must be in [0, 1)");
  require(!ablate_method_ratios.empty(), "ablate.method_ratios must not be empty");
  for (double r : ablate_method_ratios) {
    require(r >= 0.0 && r < 1.0, "ablate.method_ratios entries must be in [0, 1)");
  }
  require(ablate_study_ratio >= 0.0 && ablate_study_ratio < 1.0, "ablate.study_ratio must be in [0, 1)");
  require(ablate_recover_steps >= 0, "ablate.recover_steps must be >= 0");
  require(!out_dir.empty(), "out_dir must not be empty");
}

std::vector<int> PipelineConfig::resolve_protected() const {
  if (protected_layers == "auto") return default_protected_layers(unit, model.n_layers);
  if (protected_layers == "none" || protected_layers.empty()) return {};
  std::vector<int> out;
  std::stringstream ss(protected_layers);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const int l = parse_i32("prune.protected", trim(item));
    if (l < 0 || l >= model.n_layers) {
      fail(ErrorCode::kConfig, "prune.protected: layer " + std::to_string(l) + " out of range");
    }
    out.push_back(l);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::string PipelineConfig::canonical() const {
  std::string out;
  for (const auto& [k, f] : fields()) {
    if (k == "out_dir") continue;
    out += k + "=" + f.get(*this) + "\n";
  }
  return out;
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
  return s;
}

std::string PipelineConfig::digest() const { return hex64(fnv1a64(canonical())); }

std::string PipelineConfig::model_digest() const {
  std::string out;
  for (const auto& [k, f] : fields()) {
    if (k.rfind("model.", 0) == 0) out += k + "=" + f.get(*this) + "\n";
  }
  return hex64(fnv1a64(out));
}

std::vector<int> load_corpus(const CorpusSlot& slot) {
  std::ifstream in(slot.path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read corpus '" + slot.path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  const auto n = static_cast<double>(bytes.size());
  const auto b = static_cast<std::size_t>(std::floor(slot.begin * n));
  const auto e = static_cast<std::size_t>(std::floor(slot.end * n));
  if (e <= b) fail(ErrorCode::kData, "corpus slot of '" + slot.path + "' is empty");
  return tokenize(std::string_view(bytes).substr(b, e - b));
}

}  // namespace dprune
