#ifndef RTFGRAPH_H
#define RTFGRAPH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RtfStatus {
  RTF_STATUS_OK = 0,
  RTF_STATUS_NULL_POINTER = 1,
  RTF_STATUS_INVALID_ARGUMENT = 2,
  RTF_STATUS_SHAPE = 3,
  RTF_STATUS_NUMERICAL = 4,
  RTF_STATUS_IO = 5,
  RTF_STATUS_FORMAT = 6,
  RTF_STATUS_PANIC = 7,
} RtfStatus;

/**
 * Clean training features the network attaches queries to.
 */
typedef struct RtfBank RtfBank;

/**
 * Trained network loaded from a checkpoint.
 */
typedef struct RtfModel RtfModel;

typedef struct RtfComplex {
  double re;
  double im;
} RtfComplex;

/**
 * Shape of a feature: `mics - 1` rows of `l_uncausal + l_causal` lags.
 */
typedef struct RtfFeatureLayout {
  size_t l_uncausal;
  size_t l_causal;
  size_t mics;
  size_t ref_index;
} RtfFeatureLayout;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library on the same thread.
 */
const char *rtf_last_error(void);

/**
 * Per-bin RTF from the principal generalized eigenvector of
 * `(phi_rr, phi_vv)`, normalized to the reference microphone. A null
 * `phi_vv` means identity (the clean-signal estimate).
 *
 * `phi_rr` and `phi_vv` hold `bins * mics * mics` values; `out_h` receives
 * `bins * mics`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum RtfStatus rtf_gevd_estimate(const struct RtfComplex *phi_rr,
                                 const struct RtfComplex *phi_vv,
                                 size_t bins,
                                 size_t mics,
                                 size_t ref_index,
                                 struct RtfComplex *out_h);

/**
 * MVDR weights `phi_vv^-1 h / (h^H phi_vv^-1 h)` per bin. Bins where the
 * denominator vanishes get the reference selector and a 1 in
 * `out_fallback` (which may be null).
 *
 * # Safety
 * Pointers must be valid for the stated lengths: `h` and `out_w` hold
 * `bins * mics`, `phi_vv` holds `bins * mics * mics`, `out_fallback` holds
 * `bins`.
 */
enum RtfStatus rtf_mvdr_weights(const struct RtfComplex *h,
                                const struct RtfComplex *phi_vv,
                                size_t bins,
                                size_t mics,
                                size_t ref_index,
                                struct RtfComplex *out_w,
                                uint8_t *out_fallback);

/**
 * Time-domain feature of a spectrum: `layout.mics - 1` rows of
 * `l_uncausal + l_causal` lags, reference row dropped.
 *
 * # Safety
 * `h` holds `bins * layout.mics` values; `out` holds the layout's length.
 */
enum RtfStatus rtf_spectrum_to_feature(const struct RtfComplex *h,
                                       size_t bins,
                                       struct RtfFeatureLayout layout,
                                       double *out);

/**
 * Inverse of [`rtf_spectrum_to_feature`] onto `bins` bins.
 *
 * # Safety
 * `feature` holds the layout's length; `out_h` holds `bins * layout.mics`.
 */
enum RtfStatus rtf_feature_to_spectrum(const double *feature,
                                       struct RtfFeatureLayout layout,
                                       size_t bins,
                                       struct RtfComplex *out_h);

/**
 * Loads a checkpoint written by the training stage.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RtfStatus rtf_model_load(const char *path, struct RtfModel **out);

/**
 * Feature dimension `d` of the model, or 0 for null.
 *
 * # Safety
 * `model` must be null or come from [`rtf_model_load`].
 */
size_t rtf_model_dim(const struct RtfModel *model);

/**
 * Number of neighbors the model was trained with, or 0 for null.
 *
 * # Safety
 * `model` must be null or come from [`rtf_model_load`].
 */
size_t rtf_model_neighbors(const struct RtfModel *model);

/**
 * # Safety
 * `model` must be null or come from [`rtf_model_load`], and not be used
 * afterwards.
 */
void rtf_model_free(struct RtfModel *model);

/**
 * Bank of `n` features with `rows` rows of `dim` values each, stored node
 * after node. `ids` must be distinct.
 *
 * # Safety
 * `ids` holds `n` values, `data` holds `n * rows * dim`; `out` must be
 * writable.
 */
enum RtfStatus rtf_bank_new(const size_t *ids,
                            size_t n,
                            size_t rows,
                            size_t dim,
                            const double *data,
                            struct RtfBank **out);

/**
 * # Safety
 * `bank` must be null or come from [`rtf_bank_new`], and not be used
 * afterwards.
 */
void rtf_bank_free(struct RtfBank *bank);

/**
 * Attaches a noisy feature to its `k` nearest bank entries per row and
 * writes the network's refined feature to `out`.
 *
 * # Safety
 * `model` and `bank` must be live handles; `query` and `out` hold the
 * layout's length.
 */
enum RtfStatus rtf_model_infer(const struct RtfModel *model,
                               const struct RtfBank *bank,
                               const double *query,
                               struct RtfFeatureLayout layout,
                               size_t k,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RTFGRAPH_H */
