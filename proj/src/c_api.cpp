#include "dprune/c_api.h"

#include <cstring>
#include <new>
#include <string>

#include "dprune/checkpoint.hpp"
#include "dprune/config.hpp"
#include "dprune/error.hpp"
#include "dprune/eval.hpp"
#include "dprune/pipeline.hpp"

struct dp_config {
  dprune::PipelineConfig value;
};

struct dp_model {
  dprune::TransformerModel value;
};

namespace {

thread_local std::string last_error;

static_assert(DP_ERR_SHAPE == static_cast<int>(dprune::ErrorCode::kShape));
static_assert(DP_ERR_LOCKED == static_cast<int>(dprune::ErrorCode::kLocked));

dp_status to_status(dprune::ErrorCode code) { return static_cast<dp_status>(code); }

// Runs `fn`, mapping exceptions onto status codes and recording the message.
template <typename Fn>
dp_status guarded(Fn&& fn) {
  try {
    fn();
    last_error.clear();
    return DP_OK;
  } catch (const dprune::Error& e) {
    last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
  } catch (const std::exception& e) {
    last_error = e.what();
  } catch (...) {
    last_error = "unknown exception";
  }
  return DP_ERR_INTERNAL;
}

dp_status bad_argument(const char* what) {
  last_error = std::string("null argument: ") + what;
  return DP_ERR_ARGUMENT;
}

dp_status copy_out(const std::string& v, char* buf, size_t cap, size_t* needed) {
  if (needed) *needed = v.size() + 1;
  if (!buf || cap < v.size() + 1) {
    last_error = "buffer too small: " + std::to_string(v.size() + 1) + " bytes needed";
    return DP_ERR_LENGTH;
  }
  std::memcpy(buf, v.c_str(), v.size() + 1);
  return DP_OK;
}

}  // namespace

extern "C" {

const char* dp_status_name(dp_status status) {
  switch (status) {
    case DP_OK: return "ok";
    case DP_ERR_ARGUMENT: return "argument";
    case DP_ERR_INTERNAL: return "internal";
    default: break;
  }
  if (status >= DP_ERR_SHAPE && status <= DP_ERR_LOCKED) {
    return dprune::error_code_name(static_cast<dprune::ErrorCode>(status));
  }
  return "unknown";
}

const char* dp_last_error(void) { return last_error.c_str(); }

const char* dp_version(void) { return "1.0.0"; }

dp_status dp_config_new(dp_config** out) {
  if (!out) return bad_argument("out");
  return guarded([&] { *out = new dp_config(); });
}

void dp_config_free(dp_config* config) { delete config; }

dp_status dp_config_set(dp_config* config, const char* key, const char* value) {
  if (!config || !key || !value) return bad_argument("config/key/value");
  return guarded([&] { config->value.set(key, value); });
}


dp_status dp_config_get(const dp_config* config, const char* key, char* buf, size_t cap,
                        size_t* needed) {
  if (!config || !key) return bad_argument("config/key");
  std::string v;
  const dp_status st = guarded([&] { v = config->value.get(key); });
  return st == DP_OK ? copy_out(v, buf, cap, needed) : st;
}

dp_status dp_config_dump(const dp_config* config, char* buf, size_t cap, size_t* needed) {
  if (!config) return bad_argument("config");
  std::string v;
  const dp_status st = guarded([&] {
    v = config->value.canonical() + "out_dir=" + config->value.out_dir + "\n";
  });
  return st == DP_OK ? copy_out(v, buf, cap, needed) : st;
}

dp_status dp_config_load(dp_config* config, const char* path) {
  if (!config || !path) return bad_argument("config/path");
  return guarded([&] { config->value.load(path); });
}

dp_status dp_config_apply(dp_config* config, const char* text) {
  if (!config || !text) return bad_argument("config/text");
  return guarded([&] { config->value.apply_text(text); });
}

dp_status dp_config_set_seed(dp_config* config, uint64_t seed) {
  if (!config) return bad_argument("config");
  return guarded([&] { config->value.set_all_seeds(seed); });
}

dp_status dp_config_validate(const dp_config* config) {
  if (!config) return bad_argument("config");
  return guarded([&] { config->value.validate(); });
}

dp_status dp_config_digest(const dp_config* config, char out[17]) {
  if (!config || !out) return bad_argument("config/out");
  return guarded([&] {
    const std::string d = config->value.digest();
    std::memcpy(out, d.c_str(), 17);
  });
}

dp_status dp_run(const dp_config* config, const char* subcommand, dp_log_fn log, void* user) {
  if (!config || !subcommand) return bad_argument("config/subcommand");
  return guarded([&] {
    dprune::LogFn fn;
    if (log) fn = [log, user](const std::string& line) { log(line.c_str(), user); };
    dprune::run_subcommand(subcommand, config->value, fn);
  });
}

dp_status dp_model_init(const dp_config* config, dp_model** out) {
  if (!config || !out) return bad_argument("config/out");
  return guarded([&] {
    config->value.model.validate();
    *out = new dp_model{dprune::init_model(config->value.model, config->value.seed_init)};
  });
}

dp_status dp_model_load(const char* path, dp_model** out) {
  if (!path || !out) return bad_argument("path/out");
  return guarded([&] { *out = new dp_model{dprune::load_checkpoint(path)}; });
}

dp_status dp_model_save(const dp_model* model, const char* path) {
  if (!model || !path) return bad_argument("model/path");
  return guarded([&] { dprune::save_checkpoint(model->value, path); });
}

void dp_model_free(dp_model* model) { delete model; }

dp_status dp_model_param_count(const dp_model* model, uint64_t* out) {
  if (!model || !out) return bad_argument("model/out");
  return guarded([&] { *out = model->value.param_count(); });
}

dp_status dp_model_perplexity(const dp_model* model, const char* corpus_path, double begin,
                              double end, int seq_len, double* out) {
  if (!model || !corpus_path || !out) return bad_argument("model/corpus_path/out");
  return guarded([&] {
    const auto tokens = dprune::load_corpus({corpus_path, begin, end});
    *out = dprune::perplexity(model->value, tokens, seq_len);
  });
}

}  // extern "C"
