#ifndef GEOCONCEPT_H
#define GEOCONCEPT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GcStatus {
  GC_STATUS_OK = 0,
  GC_STATUS_USAGE = 1,
  GC_STATUS_DATA = 2,
  GC_STATUS_NUMERIC = 3,
  GC_STATUS_NULL_POINTER = 4,
  GC_STATUS_BUFFER_TOO_SMALL = 5,
  GC_STATUS_PANIC = 6,
} GcStatus;

// Location gallery bound to the model it was built from.
typedef struct GcGallery GcGallery;

// Trained model loaded from a checkpoint.
typedef struct GcModel GcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. Valid until the next call
// into this library from the same thread.
const char *gc_last_error_message(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum GcStatus gc_model_load(const char *path, struct GcModel **out);

// # Safety
// `model` must come from [`gc_model_load`] and not have been freed. Null is ignored.
void gc_model_free(struct GcModel *model);

// Embedding dimension, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t gc_model_embed_dim(const struct GcModel *model);

// Number of trained concepts, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t gc_model_num_concepts(const struct GcModel *model);

// Copies the NUL-terminated name of trained concept `index` into `buf`. `needed` receives the
// size including the terminator, also when the buffer is too small.
//
// # Safety
// `buf` must hold `cap` bytes; `needed` may be null.
enum GcStatus gc_model_concept_name(const struct GcModel *model,
                                    size_t index,
                                    char *buf,
                                    size_t cap,
                                    size_t *needed);

// Writes the location embedding of (`lat`, `lon`) into `out`, which holds `out_len` values.
//
// # Safety
// `out` must hold `out_len` doubles.
enum GcStatus gc_encode_location(const struct GcModel *model,
                                 double lat,
                                 double lon,
                                 double *out,
                                 size_t out_len);

// Dense concept activations of one image embedding of length `dim`; `out` holds `k` values.
//
// # Safety
// `x` must hold `dim` doubles and `out` must hold `k` doubles.
enum GcStatus gc_image_concepts(const struct GcModel *model,
                                const double *x,
                                size_t dim,
                                double *out,
                                size_t k);

// Sparse explanation: indices and scores of the `k_top` strongest concepts, highest first.
// `count` receives min(`k_top`, k); both output arrays must hold that many entries.
//
// # Safety
// `x` must hold `dim` doubles; `indices` and `scores` must hold `cap` entries each.
enum GcStatus gc_explain(const struct GcModel *model,
                         const double *x,
                         size_t dim,
                         size_t k_top,
                         size_t *indices,
                         double *scores,
                         size_t cap,
                         size_t *count);

// Builds a gallery from `n` coordinates given as parallel latitude and longitude arrays.
//
// # Safety
// `lats` and `lons` must hold `n` doubles; `out` must be a valid pointer.
enum GcStatus gc_gallery_build(const struct GcModel *model,
                               const double *lats,
                               const double *lons,
                               size_t n,
                               struct GcGallery **out);

// Builds a gallery over a uniform grid with spacing `resolution_deg`.
//
// # Safety
// `out` must be a valid pointer.
enum GcStatus gc_gallery_build_grid(const struct GcModel *model,
                                    double resolution_deg,
                                    struct GcGallery **out);

// # Safety
// `gallery` must come from a `gc_gallery_build*` call and not have been freed. Null is ignored.
void gc_gallery_free(struct GcGallery *gallery);

// Number of gallery rows, or 0 for a null handle.
//
// # Safety
// `gallery` must be null or a live handle.
size_t gc_gallery_len(const struct GcGallery *gallery);

// Geo-localizes `n_views` image embeddings of length `dim`, stored row-major in `views`.
// The views are averaged into one query.
//
// # Safety
// `views` must hold `n_views * dim` doubles; the three outputs must be valid pointers.
enum GcStatus gc_predict(const struct GcModel *model,
                         const struct GcGallery *gallery,
                         const double *views,
                         size_t n_views,
                         size_t dim,
                         double *out_lat,
                         double *out_lon,
                         double *out_similarity);

// Great-circle distance in km, or NaN when either coordinate is invalid.
double gc_haversine_km(double lat1, double lon1, double lat2, double lon2);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOCONCEPT_H */
