#ifndef AFEX_H
#define AFEX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AfexStatus {
  AFEX_STATUS_OK = 0,
  AFEX_STATUS_NULL_POINTER = 1,
  AFEX_STATUS_INVALID_ARGUMENT = 2,
  AFEX_STATUS_IO = 3,
  AFEX_STATUS_PARSE = 4,
  AFEX_STATUS_ORACLE = 5,
  AFEX_STATUS_TRAIN = 6,
  AFEX_STATUS_EXPLAIN = 7,
  AFEX_STATUS_PANIC = 8,
} AfexStatus;

typedef struct AfexExplanation AfexExplanation;

// A trained model with its training configuration and optimizer state.
typedef struct AfexModel AfexModel;

// A black box that can be queried and explained.
typedef struct AfexOracle AfexOracle;

// Batch callback: `x` holds `rows × d` row-major inputs, and the callback
// writes `rows` outputs to `out`. A nonzero return marks failure.
typedef int (*AfexPredictFn)(void *user_data, const double *x, size_t rows, size_t d, double *out);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy of the calling thread's last error message, or NULL if the most
// recent call succeeded. Free with [`afex_string_free`].
char *afex_last_error_message(void);

// # Safety
// `s` must be NULL or a string returned by this library, freed at most once.
void afex_string_free(char *s);

// Built-in analytic function by name (`conditional`, `chessboard`,
// `product`, `wedge`, `quad-linear`). `d = 0` selects the default dimension.
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum AfexStatus afex_oracle_analytic(const char *name, size_t d, struct AfexOracle **out);

// Oracle backed by a C function.
//
// # Safety
// `predict` must stay callable with `user_data` until the oracle is freed,
// and must tolerate calls from any thread.
enum AfexStatus afex_oracle_from_callback(size_t d,
                                          AfexPredictFn predict,
                                          void *user_data,
                                          struct AfexOracle **out);

// # Safety
// `oracle` must be NULL or a handle from this library, freed at most once.
void afex_oracle_free(struct AfexOracle *oracle);

// Evaluates `rows × d` row-major inputs into `out[rows]`.
//
// # Safety
// `x` must hold `rows · d` values and `out` room for `rows`.
enum AfexStatus afex_oracle_predict(const struct AfexOracle *oracle,
                                    const double *x,
                                    size_t rows,
                                    double *out);

// # Safety
// `oracle` must be a valid handle.
size_t afex_oracle_dim(const struct AfexOracle *oracle);

// Trains on `oracle`. `config_json` is a training configuration object;
// NULL or `"{}"` uses the defaults.
//
// # Safety
// Pointers must be valid; `config_json` may be NULL.
enum AfexStatus afex_train(const struct AfexOracle *oracle,
                           const char *config_json,
                           struct AfexModel **out);

// Loads a run configuration file, builds its oracle and trains.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AfexStatus afex_train_from_config(const char *path, struct AfexModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AfexStatus afex_model_load(const char *path, struct AfexModel **out);

// # Safety
// `model` must be a valid handle and `path` a NUL-terminated string.
enum AfexStatus afex_model_save(const struct AfexModel *model, const char *path);

// # Safety
// `model` must be a valid handle.
size_t afex_model_dim(const struct AfexModel *model);

// # Safety
// `model` must be NULL or a handle from this library, freed at most once.
void afex_model_free(struct AfexModel *model);

// Explains `oracle` around a point. `request_json` is an explain request
// object (center, neighborhood, and optional settings).
//
// # Safety
// Pointers must be valid.
enum AfexStatus afex_explain(const struct AfexModel *model,
                             const struct AfexOracle *oracle,
                             const char *request_json,
                             struct AfexExplanation **out);

// Curve length for `feature`, or 0 if it is out of range.
//
// # Safety
// `explanation` must be a valid handle.
size_t afex_explanation_curve_len(const struct AfexExplanation *explanation, size_t feature);

// Copies the shape curve of `feature` into `grid` and `values`, each with
// room for `capacity` entries, and its importance into `importance`.
//
// # Safety
// Output buffers must hold `capacity` values; `importance` may be NULL.
enum AfexStatus afex_explanation_curve(const struct AfexExplanation *explanation,
                                       size_t feature,
                                       double *grid,
                                       double *values,
                                       size_t capacity,
                                       double *importance);

// The whole explanation as JSON. Free the string with [`afex_string_free`].
//
// # Safety
// `explanation` must be a valid handle and `out` a valid pointer.
enum AfexStatus afex_explanation_to_json(const struct AfexExplanation *explanation, char **out);

// # Safety
// `explanation` must be NULL or a handle from this library, freed at most once.
void afex_explanation_free(struct AfexExplanation *explanation);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AFEX_H */
