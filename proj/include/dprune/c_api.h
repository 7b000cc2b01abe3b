#ifndef DPRUNE_C_API_H
#define DPRUNE_C_API_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define DP_API __attribute__((visibility("default")))
#else
#define DP_API
#endif

/* Status codes. Values are stable; 0 is success. */
typedef enum dp_status {
  DP_OK = 0,
  DP_ERR_SHAPE = 1,
  DP_ERR_INDEX = 2,
  DP_ERR_CONTRACT = 3,
  DP_ERR_CONFIG = 4,
  DP_ERR_LENGTH = 5,
  DP_ERR_DATA = 6,
  DP_ERR_PLAN_STALE = 7,
  DP_ERR_SELECTION = 8,
  DP_ERR_INTEGRITY = 9,
  DP_ERR_VERSION = 10,
  DP_ERR_IO = 11,
  DP_ERR_DEPENDENCY = 12,
  DP_ERR_UNDEFINED = 13,
  DP_ERR_LOCKED = 14,
  DP_ERR_ARGUMENT = 98, /* null handle or pointer */
  DP_ERR_INTERNAL = 99
} dp_status;

typedef struct dp_config dp_config;
typedef struct dp_model dp_model;

/* Stable lowercase name of a status ("ok", "config", ...). */
DP_API const char* dp_status_name(dp_status status);
/* Message of the last failed call on this thread; "" after a success. */
DP_API const char* dp_last_error(void);
DP_API const char* dp_version(void);

/* Configuration: every key has a default; unknown keys are rejected. */
DP_API dp_status dp_config_new(dp_config** out);
DP_API void dp_config_free(dp_config* config);
DP_API dp_status dp_config_set(dp_config* config, const char* key, const char* value);
/* Copies the value and its terminator into buf when it fits; *needed (optional)
   receives the length including the terminator. DP_ERR_LENGTH when too small. */
DP_API dp_status dp_config_get(const dp_config* config, const char* key, char* buf, size_t cap,
                               size_t* needed);
DP_API dp_status dp_config_load(dp_config* config, const char* path);
/* Applies `key=value` lines, as in a config file. */
DP_API dp_status dp_config_apply(dp_config* config, const char* text);
/* Sets every named seed (init, data, random) to `seed`. */
DP_API dp_status dp_config_set_seed(dp_config* config, uint64_t seed);
DP_API dp_status dp_config_validate(const dp_config* config);
/* Canonical `key=value` lines for every key (same buffer rules as get). */
DP_API dp_status dp_config_dump(const dp_config* config, char* buf, size_t cap, size_t* needed);
/* 16 lowercase hex digits plus terminator. */
DP_API dp_status dp_config_digest(const dp_config* config, char out[17]);

/* Runs one subcommand (train-base, discover, estimate, plan, prune, recover,
   eval, ablate, pipeline). `log` (optional) receives progress lines. */
typedef void (*dp_log_fn)(const char* line, void* user);
DP_API dp_status dp_run(const dp_config* config, const char* subcommand, dp_log_fn log,
                        void* user);

/* Checkpoints. */
DP_API dp_status dp_model_init(const dp_config* config, dp_model** out);
DP_API dp_status dp_model_load(const char* path, dp_model** out);
DP_API dp_status dp_model_save(const dp_model* model, const char* path);
DP_API void dp_model_free(dp_model* model);
DP_API dp_status dp_model_param_count(const dp_model* model, uint64_t* out);
/* Perplexity over the byte range [begin, end) (fractions) of a corpus file. */
DP_API dp_status dp_model_perplexity(const dp_model* model, const char* corpus_path, double begin,
                                     double end, int seq_len, double* out);

#ifdef __cplusplus
}
#endif

#endif
