#ifndef SHEPHERD_H
#define SHEPHERD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SHEPHERD_OK 0

#define SHEPHERD_NULL_POINTER 1

#define SHEPHERD_INVALID_ARGUMENT 2

#define SHEPHERD_CONFIG 3

#define SHEPHERD_CFL 4

#define SHEPHERD_NUMERICAL 5

#define SHEPHERD_BUDGET 6

#define SHEPHERD_IO 7

#define SHEPHERD_BUFFER_TOO_SMALL 8

#define SHEPHERD_PANIC 9

// Resolved run configuration.
typedef struct ShepherdConfig ShepherdConfig;

// Reduced cost over the full horizon of a configuration, for driving an
// external optimizer.
typedef struct ShepherdProblem ShepherdProblem;

// Finished experiment.
typedef struct ShepherdRun ShepherdRun;

// Moments and cost parts at one solver node.
typedef struct ShepherdNode {
  double t;
  double mean_x;
  double mean_y;
  double variance;
  double mass;
  double j1;
  double j2;
  double j3;
} ShepherdNode;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *shepherd_last_error(void);

// Library version as a static NUL-terminated string.
const char *shepherd_version(void);

// Default configuration.
int32_t shepherd_config_new(struct ShepherdConfig **out);

// Configuration parsed from TOML text; unknown keys are an error.
int32_t shepherd_config_from_toml(const char *toml_text, struct ShepherdConfig **out);

// Applies one `section.key=value` assignment; the handle is unchanged when
// the result does not validate.
int32_t shepherd_config_set(struct ShepherdConfig *config, const char *assignment);

// Resolved configuration as TOML; release with `shepherd_string_free`.
int32_t shepherd_config_to_toml(const struct ShepherdConfig *config, char **out);

void shepherd_config_free(struct ShepherdConfig *config);

void shepherd_string_free(char *s);

// Runs the configured experiment in memory. When `output_dir` is not null
// the artifacts and manifest are written there as well.
int32_t shepherd_run(const struct ShepherdConfig *config,
                     const char *output_dir,
                     struct ShepherdRun **out);

size_t shepherd_run_node_count(const struct ShepherdRun *run);

int32_t shepherd_run_node(const struct ShepherdRun *run, size_t index, struct ShepherdNode *out);

// Glued control, flat `slices × agents × 2`. Call with a null buffer to
// query the length through `needed`.
int32_t shepherd_run_control(const struct ShepherdRun *run,
                             double *buffer,
                             size_t len,
                             size_t *needed);

void shepherd_run_free(struct ShepherdRun *run);

int32_t shepherd_problem_new(const struct ShepherdConfig *config, struct ShepherdProblem **out);

// Number of control values, `slices × agents × 2`.
size_t shepherd_problem_control_len(const struct ShepherdProblem *problem);

// `Ĵ(u)` for a control of exactly `shepherd_problem_control_len` values.
int32_t shepherd_problem_cost(struct ShepherdProblem *problem,
                              const double *control,
                              size_t len,
                              double *cost);

// Adjoint gradient of `Ĵ` at `control`, written into `gradient` (same length).
// Entries are the partial derivatives with respect to the buffer entries,
// so `Σ gradient[i]·d[i]` is the directional derivative along `d`.
int32_t shepherd_problem_gradient(struct ShepherdProblem *problem,
                                  const double *control,
                                  size_t len,
                                  double *gradient);

void shepherd_problem_free(struct ShepherdProblem *problem);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHEPHERD_H */
