#ifndef PHYSMEAS_H
#define PHYSMEAS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PM_STATUS_OK = 0,
  PM_STATUS_NULL_POINTER = 1,
  PM_STATUS_INVALID_UTF8 = 2,
  PM_STATUS_BUFFER_TOO_SMALL = 3,
  PM_STATUS_DOMAIN = 4,
  PM_STATUS_CATALOG = 5,
  PM_STATUS_VALIDATION = 6,
  PM_STATUS_DIVERGENCE = 7,
  PM_STATUS_NUMERIC = 8,
  PM_STATUS_OVERFLOW = 9,
  PM_STATUS_PARSE = 10,
  PM_STATUS_CONFIG = 11,
  PM_STATUS_IO = 12,
  PM_STATUS_PANIC = 13,
} PmStatus;

// Spectrum classes reported by [`pm_classify_spectrum`].
typedef enum {
  PM_SPECTRUM_KIND_UNIMODAL_MAP = 0,
  PM_SPECTRUM_KIND_UNIMODAL_FLOW = 1,
  PM_SPECTRUM_KIND_NON_HYPERBOLIC = 2,
  PM_SPECTRUM_KIND_UNDETERMINED = 3,
} PmSpectrumKind;

// Opaque handle to a builtin system.
typedef struct PmSystem PmSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty after a success. The
// pointer stays valid until the next library call on the same thread.
const char *pm_last_error(void);

// Library version as a static NUL-terminated string.
const char *pm_version(void);

// Builds a builtin system. `keys` and `values` hold `n_params` parameter
// overrides and may be null when `n_params` is 0.
//
// # Safety
// `name` and each key must be NUL-terminated; `keys` and `values` must point
// to `n_params` elements; `out` must be writable.
PmStatus pm_system_new(const char *name,
                       const char *const *keys,
                       const double *values,
                       uintptr_t n_params,
                       PmSystem **out);

// # Safety
// `system` must come from [`pm_system_new`] and not be freed twice.
void pm_system_free(PmSystem *system);

// State dimension, or 0 for a null handle.
//
// # Safety
// `system` must be null or a live handle.
uintptr_t pm_system_dim(const PmSystem *system);

// Seconds of flow time per iteration (1 for maps).
//
// # Safety
// `system` must be null or a live handle.
double pm_system_time_per_step(const PmSystem *system);

// QR estimate of the full spectrum, sorted descending, per iteration for
// maps and per unit time for flows. A null `x0` uses the system default.
//
// # Safety
// `x0` must be null or hold `x0_len` values; `out` must hold `out_len`.
PmStatus pm_lyapunov_spectrum(const PmSystem *system,
                              const double *x0,
                              uintptr_t x0_len,
                              uint64_t n,
                              uint64_t renorm_interval,
                              uint64_t burn_in,
                              double *out,
                              uintptr_t out_len);

// Growth rate of `‖∧^k Df^n‖` along the orbit of `x0`.
//
// # Safety
// `x0` must be null or hold `x0_len` values; `out` must be writable.
PmStatus pm_wedge_exponent(const PmSystem *system,
                           const double *x0,
                           uintptr_t x0_len,
                           uint64_t n,
                           uintptr_t k,
                           double *out);

// Classifies a descending spectrum. `out_k` receives the unstable index for
// unimodal classes and 0 otherwise.
//
// # Safety
// `exponents` must hold `len` values; `out_kind` and `out_k` must be writable.
PmStatus pm_classify_spectrum(const double *exponents,
                              uintptr_t len,
                              bool flow,
                              double c0,
                              double zero_tol,
                              PmSpectrumKind *out_kind,
                              uintptr_t *out_k);

// Runs a TOML run description on `threads` workers (0 picks one) and
// returns the JSON report in `out_json`. Release it with [`pm_string_free`].
//
// # Safety
// `config_toml` must be NUL-terminated; `out_json` must be writable.
PmStatus pm_run_config(const char *config_toml, uintptr_t threads, char **out_json);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void pm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHYSMEAS_H */
