#ifndef USRA_H
#define USRA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

// Result code of every fallible call.
typedef enum UsraStatus {
  USRA_STATUS_OK = 0,
  USRA_STATUS_NULL_ARGUMENT = 1,
  USRA_STATUS_INVALID_ARGUMENT = 2,
  USRA_STATUS_IO = 3,
  USRA_STATUS_CORRUPT = 4,
  USRA_STATUS_FAILED = 5,
  USRA_STATUS_PANIC = 6,
} UsraStatus;

// Resolved training configuration.
typedef struct UsraConfig UsraConfig;

// One environment instance with its own domain and frame stack.
typedef struct UsraEnv UsraEnv;

// Trained or freshly initialized network bundle.
typedef struct UsraModel UsraModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *usra_last_error(void);

// Library version as a static NUL-terminated string.
const char *usra_version(void);

// Number of floats in one observation (`9 × 48 × 48`, channel-major).
uintptr_t usra_observation_len(void);

uintptr_t usra_num_actions(void);

// Fresh model. `general_mean_head` selects the Q-head that reads only the
// domain-general mean instead of the full latent.
//
// # Safety
// `out` must be valid for a pointer write.
enum UsraStatus usra_model_new(uint64_t seed, bool general_mean_head, struct UsraModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` valid for a pointer write.
enum UsraStatus usra_model_load(const char *path, struct UsraModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum UsraStatus usra_model_save(const struct UsraModel *model, const char *path);

// # Safety
// `model` must come from this library and not be used afterwards. Null is ignored.
void usra_model_free(struct UsraModel *model);

// Q-values of one observation into `out[0..5]`.
//
// # Safety
// `obs` must hold `obs_len` floats and `out` room for `usra_num_actions()` floats.
enum UsraStatus usra_model_q_values(const struct UsraModel *model,
                                    const float *obs,
                                    uintptr_t obs_len,
                                    float *out);

// Greedy action index for one observation.
//
// # Safety
// `obs` must hold `obs_len` floats and `action` be valid for a write.
enum UsraStatus usra_model_act(const struct UsraModel *model,
                               const float *obs,
                               uintptr_t obs_len,
                               uint32_t *action);

// Mean greedy return over `episodes` episodes of the named domain.
//
// # Safety
// `domain` must be NUL-terminated and `mean` valid for a write.
enum UsraStatus usra_model_evaluate(const struct UsraModel *model,
                                    const char *domain,
                                    uintptr_t episodes,
                                    uint64_t seed,
                                    double *mean);

// Environment for a domain variant (`train`, `color_easy`, `color_hard`,
// `video_easy`, `video_hard`). `domain_seed` draws the visual parameters,
// `reset_seed` the initial state.
//
// # Safety
// `domain` must be NUL-terminated and `out` valid for a pointer write.
enum UsraStatus usra_env_new(const char *domain,
                             uint64_t domain_seed,
                             uint64_t reset_seed,
                             struct UsraEnv **out);

// # Safety
// `env` must come from this library.
enum UsraStatus usra_env_reset(struct UsraEnv *env, uint64_t seed);

// Applies `action` (0..5). Stepping a finished episode is an error.
//
// # Safety
// `env` must come from this library; `reward` and `done` valid for writes.
enum UsraStatus usra_env_step(struct UsraEnv *env, uint32_t action, float *reward, bool *done);

// Copies the current observation into `out` (`usra_observation_len()` floats).
//
// # Safety
// `out` must have room for `len` floats.
enum UsraStatus usra_env_observation(const struct UsraEnv *env, float *out, uintptr_t len);

// # Safety
// `env` must come from this library and not be used afterwards. Null is ignored.
void usra_env_free(struct UsraEnv *env);

// Parses config text (`key = value` lines, `#` comments).
//
// # Safety
// `text` must be NUL-terminated and `out` valid for a pointer write.
enum UsraStatus usra_config_parse(const char *text, struct UsraConfig **out);

// Sets one key; the whole config is re-validated.
//
// # Safety
// `config` must come from this library; `key` and `value` NUL-terminated.
enum UsraStatus usra_config_set(struct UsraConfig *config, const char *key, const char *value);

// Seed of a parsed config.
//
// # Safety
// `config` must come from this library and `seed` be valid for a write.
enum UsraStatus usra_config_seed(const struct UsraConfig *config, uint64_t *seed);

// # Safety
// `config` must come from this library and not be used afterwards. Null is ignored.
void usra_config_free(struct UsraConfig *config);

// `100 (a - b) / b` rounded to one decimal; `b == 0` is an invalid argument.
//
// # Safety
// `out` must be valid for a write.
enum UsraStatus usra_relative_improvement(double a, double b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* USRA_H */
