#ifndef SKELGNN_H
#define SKELGNN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SkgStatus {
  SKG_STATUS_OK = 0,
  SKG_STATUS_NULL_POINTER = 1,
  SKG_STATUS_INVALID_ARGUMENT = 2,
  SKG_STATUS_IO = 3,
  SKG_STATUS_PARSE = 4,
  SKG_STATUS_SHAPE_MISMATCH = 5,
  SKG_STATUS_DEGENERATE = 6,
  SKG_STATUS_INTERNAL = 7,
} SkgStatus;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct SkgModel SkgModel;

/**
 * A skeleton graph.
 */
typedef struct SkgTopology SkgTopology;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next `skg_*` call on the same thread.
 */
const char *skg_last_error(void);

/**
 * Library version as a static string.
 */
const char *skg_version(void);

/**
 * Creates the built-in 17-joint topology.
 *
 * # Safety
 * `out` must be a valid pointer to write a handle to.
 */
enum SkgStatus skg_topology_h36m(struct SkgTopology **out);

/**
 * Loads a topology file (TOML by extension, JSON otherwise).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SkgStatus skg_topology_load(const char *path, struct SkgTopology **out);

/**
 * Releases a topology. Null is ignored.
 *
 * # Safety
 * `t` must come from a topology constructor and not be freed twice.
 */
void skg_topology_free(struct SkgTopology *t);

/**
 * # Safety
 * `t` must be a live handle and `out` a valid pointer.
 */
enum SkgStatus skg_topology_num_nodes(const struct SkgTopology *t, size_t *out);

/**
 * Writes the `N*N` hop-distance matrix into `out`, which holds `len`
 * entries.
 *
 * # Safety
 * `t` must be a live handle and `out` must point to `len` writable values.
 */
enum SkgStatus skg_topology_hop_distances(const struct SkgTopology *t, uint32_t *out, size_t len);

/**
 * Loads a checkpoint written by `skelgnn train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SkgStatus skg_model_load(const char *path, struct SkgModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `m` must come from `skg_model_load` and not be freed twice.
 */
void skg_model_free(struct SkgModel *m);

/**
 * Number of input values for a batch of `batch` samples: `batch*N*2` for
 * single-frame models, `batch*2*T*N` for temporal ones.
 *
 * # Safety
 * `m` must be a live handle and `out` a valid pointer.
 */
enum SkgStatus skg_model_input_len(const struct SkgModel *m, size_t batch, size_t *out);

/**
 * Eval-mode prediction. `input` holds normalized 2D joints in the layout
 * given by `skg_model_input_len`; `out` receives `batch*N*3` root-relative
 * coordinates.
 *
 * # Safety
 * `m` must be a live handle; `input` and `out` must hold `input_len` and
 * `out_len` values.
 */
enum SkgStatus skg_model_predict(const struct SkgModel *m,
                                 const double *input,
                                 size_t input_len,
                                 size_t batch,
                                 double *out,
                                 size_t out_len);

/**
 * Mean per-joint position error between two `num_joints x 3` poses.
 *
 * # Safety
 * `pred` and `gt` must hold `3*num_joints` values; `out` must be valid.
 */
enum SkgStatus skg_mpjpe(const double *pred, const double *gt, size_t num_joints, double *out);

/**
 * MPJPE after similarity (Procrustes) alignment of `pred` onto `gt`.
 *
 * # Safety
 * As for [`skg_mpjpe`].
 */
enum SkgStatus skg_pa_mpjpe(const double *pred, const double *gt, size_t num_joints, double *out);

/**
 * Maps pixel coordinates to `[-1, 1]` for a `width x height` image.
 * `joints` and `out` hold `2*num_joints` values and may alias.
 *
 * # Safety
 * Both pointers must reference `2*num_joints` values.
 */
enum SkgStatus skg_normalize_2d(const double *joints,
                                size_t num_joints,
                                uint32_t width,
                                uint32_t height,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKELGNN_H */
