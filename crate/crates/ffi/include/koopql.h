#ifndef KOOPQL_H
#define KOOPQL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Status codes returned by every fallible call.
typedef enum KqlStatus {
  KQL_STATUS_OK = 0,
  KQL_STATUS_NULL_POINTER = 1,
  KQL_STATUS_INVALID_INPUT = 2,
  KQL_STATUS_DATA = 3,
  KQL_STATUS_POLICY = 4,
  KQL_STATUS_NUMERICAL = 5,
  KQL_STATUS_PANIC = 6,
} KqlStatus;

// `Gamma` construction method for [`kql_embedding_build`].
typedef enum KqlGammaMethod {
  KQL_GAMMA_METHOD_EXACT = 0,
  KQL_GAMMA_METHOD_SVD = 1,
} KqlGammaMethod;

typedef struct KqlController KqlController;

typedef struct KqlDataset KqlDataset;

typedef struct KqlEmbedding KqlEmbedding;

typedef struct KqlLearnResult KqlLearnResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *kql_version(void);

// Copy of the calling thread's last error message, or NULL if the last
// call succeeded. Free with [`kql_string_free`].
char *kql_last_error_message(void);

// # Safety
// `s` must come from this library and not have been freed.
void kql_string_free(char *s);

// Collects `nu` trajectories of `ell + 1` samples from a builtin plant with
// inputs and initial states uniform on (-1, 1).
//
// # Safety
// `plant` must be a NUL-terminated string and `out` a valid pointer.
enum KqlStatus kql_dataset_collect(const char *plant,
                                   uintptr_t nu,
                                   uintptr_t ell,
                                   uint64_t seed,
                                   double output_sigma,
                                   struct KqlDataset **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum KqlStatus kql_dataset_load(const char *path, struct KqlDataset **out);

// # Safety
// `dataset` must be a live handle and `path` a NUL-terminated string.
enum KqlStatus kql_dataset_save(const struct KqlDataset *dataset, const char *path);

// # Safety
// `dataset` must be a live handle or NULL.
uintptr_t kql_dataset_len(const struct KqlDataset *dataset);

// Rank test on the dataset's Hankel matrix.
//
// # Safety
// `dataset` must be a live handle; `is_pe` and `rank` valid pointers.
enum KqlStatus kql_dataset_check_pe(const struct KqlDataset *dataset,
                                    uintptr_t eta_bound,
                                    bool *is_pe,
                                    uintptr_t *rank);

// # Safety
// `dataset` must come from this library and not have been freed.
void kql_dataset_free(struct KqlDataset *dataset);

// # Safety
// `dataset` must be a live handle and `out` a valid pointer.
enum KqlStatus kql_embedding_build(const struct KqlDataset *dataset,
                                   uintptr_t eta_bound,
                                   enum KqlGammaMethod method,
                                   struct KqlEmbedding **out);

// Dimension of the non-minimal state, 0 for NULL.
//
// # Safety
// `emap` must be a live handle or NULL.
uintptr_t kql_embedding_state_dim(const struct KqlEmbedding *emap);

// JSON rendering; free the string with [`kql_string_free`].
//
// # Safety
// `emap` must be a live handle and `out` a valid pointer.
enum KqlStatus kql_embedding_to_json(const struct KqlEmbedding *emap, char **out);

// # Safety
// `emap` must come from this library and not have been freed.
void kql_embedding_free(struct KqlEmbedding *emap);

// Runs policy iteration from `K = 0` with diagonal weights `q_diag` (length
// `p`) and `r_diag` (length `m`).
//
// # Safety
// Handles must be live; `q_diag` and `r_diag` must point to `p` and `m`
// readable doubles; `out` must be a valid pointer.
enum KqlStatus kql_learn(const struct KqlDataset *dataset,
                         const struct KqlEmbedding *emap,
                         const double *q_diag,
                         uintptr_t p,
                         const double *r_diag,
                         uintptr_t m,
                         uintptr_t max_iters,
                         double gain_tol,
                         struct KqlLearnResult **out);

// # Safety
// `result` must be a live handle or NULL.
uintptr_t kql_learn_result_iterations(const struct KqlLearnResult *result);

// # Safety
// `result` must be a live handle or NULL.
bool kql_learn_result_converged(const struct KqlLearnResult *result);

// Copies the final gain, row-major, into `buf` of length `len`
// (which must equal `m * state_dim`).
//
// # Safety
// `result` must be a live handle and `buf` writable for `len` doubles.
enum KqlStatus kql_learn_result_gain(const struct KqlLearnResult *result,
                                     double *buf,
                                     uintptr_t len);

// # Safety
// `result` must be a live handle and `out` a valid pointer.
enum KqlStatus kql_learn_result_to_json(const struct KqlLearnResult *result, char **out);

// # Safety
// `result` must come from this library and not have been freed.
void kql_learn_result_free(struct KqlLearnResult *result);

// Online controller for the final learned gain; the first `ell` actions are
// zero while the window fills.
//
// # Safety
// Handles must be live and `out` a valid pointer.
enum KqlStatus kql_controller_new(const struct KqlLearnResult *result,
                                  const struct KqlEmbedding *emap,
                                  struct KqlController **out);

// Feeds the current output `y` (length `p`) and writes `u` (length `m`).
//
// # Safety
// `ctrl` must be a live handle, `y` readable for `p` doubles and `u`
// writable for `m` doubles.
enum KqlStatus kql_controller_step(struct KqlController *ctrl,
                                   const double *y,
                                   uintptr_t p,
                                   double *u,
                                   uintptr_t m);

// # Safety
// `ctrl` must come from this library and not have been freed.
void kql_controller_free(struct KqlController *ctrl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPQL_H */
