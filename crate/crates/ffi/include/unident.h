/* C interface for the unident identifiability and controller-design library. */

#ifndef UNIDENT_H
#define UNIDENT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible entry point. `UNIDENT_STATUS_OK`
// is zero; anything else leaves a message in `unident_last_error`.
typedef enum UnidentStatus {
  UNIDENT_STATUS_OK = 0,
  // A required pointer argument was NULL.
  UNIDENT_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  UNIDENT_STATUS_UTF8 = 2,
  // An internal panic was caught at the boundary.
  UNIDENT_STATUS_PANIC = 3,
  // The provided buffer is too small for the result.
  UNIDENT_STATUS_BUFFER = 4,
  UNIDENT_STATUS_SHAPE = 10,
  UNIDENT_STATUS_INVALID_MATRIX = 11,
  UNIDENT_STATUS_NOT_STABILIZABLE = 12,
  UNIDENT_STATUS_SINGULAR_GAIN = 13,
  UNIDENT_STATUS_RANK_DEFICIENT = 14,
  UNIDENT_STATUS_REDUCED_LOOP_UNSTABLE = 15,
  UNIDENT_STATUS_UNSUPPORTED_INITIAL_STATE = 16,
  UNIDENT_STATUS_EVAL = 17,
  UNIDENT_STATUS_DIVERGED = 18,
  UNIDENT_STATUS_PARSE = 19,
  UNIDENT_STATUS_IO = 20,
  UNIDENT_STATUS_JSON = 21,
  UNIDENT_STATUS_CSV = 22,
} UnidentStatus;

// Opaque handle to a designed feedback controller.
typedef struct UnidentController UnidentController;

// Opaque handle to a parameterized linear system.
typedef struct UnidentSystem UnidentSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; never freed by the caller.
const char *unident_version(void);

// Message describing the most recent failure on this thread. The pointer
// stays valid until the next failing call on the same thread; never freed
// by the caller.
const char *unident_last_error(void);

// Release a string returned through a `char **` output.
void unident_string_free(char *s);

// Parse a system from its JSON description (matrices `A`, `B`, `C`, the
// free-parameter `mask`, optional `x0`).
enum UnidentStatus unident_system_parse(const char *json, struct UnidentSystem **out);

// Serialize a system back to pretty JSON; release with
// `unident_string_free`.
enum UnidentStatus unident_system_to_json(const struct UnidentSystem *sys, char **out);

// Release a system handle.
void unident_system_free(struct UnidentSystem *sys);

// Report state, input, output, and free-parameter counts. Any output
// pointer may be NULL to skip that field.
enum UnidentStatus unident_system_dims(const struct UnidentSystem *sys,
                                       size_t *p,
                                       size_t *l,
                                       size_t *m,
                                       size_t *n_params);

// Decide identifiability from a logged input sequence `u` (row-major,
// `t` steps by `l` channels). Writes the full report as JSON; release it
// with `unident_string_free`. Pass non-positive tolerances to use the
// defaults.
enum UnidentStatus unident_analyze(const struct UnidentSystem *sys,
                                   const double *u,
                                   size_t t,
                                   double rank_eps,
                                   double residual_eps,
                                   char **out);

// Design a feedback controller with scalar weights `q` (outputs) and `r`
// (inputs). `rank` 0 picks the default order `min(l-1, p)`; the design is
// deterministic per `seed`.
enum UnidentStatus unident_design(const struct UnidentSystem *sys,
                                  double q,
                                  double r,
                                  size_t rank,
                                  uint64_t seed,
                                  struct UnidentController **out);

// Parse a controller previously serialized with
// `unident_controller_to_json`.
enum UnidentStatus unident_controller_parse(const char *json, struct UnidentController **out);

// Serialize a controller to pretty JSON; release with
// `unident_string_free`.
enum UnidentStatus unident_controller_to_json(const struct UnidentController *ctl, char **out);

// Release a controller handle.
void unident_controller_free(struct UnidentController *ctl);

// Report the feedback shape (`l` rows, `p` columns) and the controller
// order `r`. Any output pointer may be NULL.
enum UnidentStatus unident_controller_dims(const struct UnidentController *ctl,
                                           size_t *l,
                                           size_t *p,
                                           size_t *r);

// Copy the effective state-feedback matrix (`u = -F*x`, `l` by `p`,
// row-major) into a caller buffer of capacity `len` elements.
enum UnidentStatus unident_controller_feedback(const struct UnidentController *ctl,
                                               double *out,
                                               size_t len);

// Solve the unrestricted infinite-horizon regulator with scalar weights
// and copy the optimal gain (`l` by `p`, row-major) into a caller buffer
// of capacity `len` elements.
enum UnidentStatus unident_lqr_gain(const struct UnidentSystem *sys,
                                    double q,
                                    double r,
                                    double *out,
                                    size_t len);

// Simulate the closed loop `x_next = (A - B*F)*x` for `steps` steps from
// `x0` (length `p`; NULL starts at the origin). `u_out` (`steps` by `l`)
// and `y_out` (`steps` by `m`) are filled row-major when non-NULL;
// `u_len` / `y_len` give their capacities in elements.
enum UnidentStatus unident_simulate_closed(const struct UnidentSystem *sys,
                                           const struct UnidentController *ctl,
                                           const double *x0,
                                           size_t steps,
                                           double *u_out,
                                           size_t u_len,
                                           double *y_out,
                                           size_t y_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIDENT_H */
