#ifndef PATT_H
#define PATT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum PattStatus {
  PATT_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  PATT_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or inconsistent.
   */
  PATT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or written.
   */
  PATT_STATUS_IO = 3,
  /**
   * A file was malformed.
   */
  PATT_STATUS_FORMAT = 4,
  /**
   * A configuration was rejected.
   */
  PATT_STATUS_CONFIG = 5,
  /**
   * A computation produced NaN or infinity.
   */
  PATT_STATUS_NON_FINITE = 6,
  /**
   * A caller buffer was too small; the required size was still reported.
   */
  PATT_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * An internal invariant failed; the library state is unaffected.
   */
  PATT_STATUS_INTERNAL = 8,
} PattStatus;

/**
 * Neighbor search used by [`patt_neighbor_windows`].
 */
typedef enum PattSearch {
  PATT_SEARCH_VOXEL = 0,
  PATT_SEARCH_KNN = 1,
} PattSearch;

/**
 * A point cloud with per-point features.
 */
typedef struct PattCloud PattCloud;

/**
 * Trained parameters together with the network configuration.
 */
typedef struct PattModel PattModel;

/**
 * Per-point labels (segmentation models) and boxes (detection models).
 */
typedef struct PattPrediction PattPrediction;

/**
 * Neighbor lists, one per point.
 */
typedef struct PattWindows PattWindows;

/**
 * An oriented 3D box; `yaw` rotates about the vertical axis.
 */
typedef struct PattBox {
  double center[3];
  double size[3];
  double yaw;
  double score;
  uint32_t class_id;
} PattBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *patt_version(void);

/**
 * Message of the last failed call on this thread, or null when none has
 * failed. Valid until the next failing call on the same thread.
 */
const char *patt_last_error(void);

/**
 * Builds a cloud from `n` xyz triples and `n × channels` features, both
 * row-major. `feats` may be null when `channels` is 0.
 *
 * # Safety
 * `xyz` must hold `3n` doubles and `feats` `n × channels` doubles.
 */
enum PattStatus patt_cloud_new(const double *xyz,
                               size_t n,
                               const double *feats,
                               size_t channels,
                               struct PattCloud **out);

/**
 * Reads a binary point file (x, y, z, intensity as little-endian floats).
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum PattStatus patt_cloud_load(const char *path, struct PattCloud **out);

/**
 * Number of points, 0 for a null handle.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
size_t patt_cloud_len(const struct PattCloud *cloud);

/**
 * # Safety
 * `cloud` must be null or a live handle, which is invalid afterwards.
 */
void patt_cloud_free(struct PattCloud *cloud);

/**
 * Loads a checkpoint and the configuration it was trained with. The task
 * is inferred from the stored heads.
 *
 * # Safety
 * Both paths must be NUL-terminated strings.
 */
enum PattStatus patt_model_load(const char *checkpoint, const char *config, struct PattModel **out);

/**
 * # Safety
 * `model` must be null or a live handle, which is invalid afterwards.
 */
void patt_model_free(struct PattModel *model);

/**
 * Runs inference. Boxes scoring at or below `score_threshold` are dropped
 * and the rest pass through non-maximum suppression at `nms_iou`.
 *
 * # Safety
 * `model` and `cloud` must be live handles.
 */
enum PattStatus patt_model_predict(const struct PattModel *model,
                                   const struct PattCloud *cloud,
                                   double score_threshold,
                                   double nms_iou,
                                   struct PattPrediction **out);

/**
 * Copies per-point labels into `labels` (capacity `cap`) and reports the
 * count in `len`. A null `labels` only queries the count. Models without a
 * segmentation head report 0.
 *
 * # Safety
 * `pred` must be a live handle; `labels` must hold `cap` entries.
 */
enum PattStatus patt_prediction_labels(const struct PattPrediction *pred,
                                       uint32_t *labels,
                                       size_t cap,
                                       size_t *len);

/**
 * Number of boxes, 0 for a null handle.
 *
 * # Safety
 * `pred` must be null or a live handle.
 */
size_t patt_prediction_num_boxes(const struct PattPrediction *pred);

/**
 * Box `index`, in descending score order.
 *
 * # Safety
 * `pred` must be a live handle.
 */
enum PattStatus patt_prediction_box(const struct PattPrediction *pred,
                                    size_t index,
                                    struct PattBox *out);

/**
 * # Safety
 * `pred` must be null or a live handle, which is invalid afterwards.
 */
void patt_prediction_free(struct PattPrediction *pred);

/**
 * Attention windows of every point: up to `m` neighbors within `radius`
 * (voxel search) or exactly `min(m, n)` nearest neighbors (kNN, `radius`
 * ignored).
 *
 * # Safety
 * `cloud` must be a live handle.
 */
enum PattStatus patt_neighbor_windows(const struct PattCloud *cloud,
                                      enum PattSearch search,
                                      double radius,
                                      size_t m,
                                      struct PattWindows **out);

/**
 * Number of windows (one per point), 0 for a null handle.
 *
 * # Safety
 * `w` must be null or a live handle.
 */
size_t patt_windows_len(const struct PattWindows *w);

/**
 * Borrows window `i`: ascending point indices, valid while `w` lives.
 *
 * # Safety
 * `w` must be a live handle.
 */
enum PattStatus patt_windows_get(const struct PattWindows *w,
                                 size_t i,
                                 const size_t **indices,
                                 size_t *len);

/**
 * # Safety
 * `w` must be null or a live handle, which is invalid afterwards.
 */
void patt_windows_free(struct PattWindows *w);

/**
 * Birds-eye intersection over union of two boxes.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PattStatus patt_bev_iou(const struct PattBox *a, const struct PattBox *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATT_H */
