#ifndef ISUP_GRADING_H
#define ISUP_GRADING_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Highest number of head outputs (the categorical head has six).
 */
#define ISUP_MAX_OUTPUTS 6

/**
 * Result code of every fallible call.
 */
typedef enum IsupStatus {
  ISUP_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ISUP_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ISUP_STATUS_INVALID_UTF8 = 2,
  /**
   * A file could not be read or decoded.
   */
  ISUP_STATUS_IO = 3,
  /**
   * The checkpoint is malformed or not a grader checkpoint.
   */
  ISUP_STATUS_CHECKPOINT = 4,
  /**
   * Arguments or data were rejected (sizes, labels, empty slides).
   */
  ISUP_STATUS_INVALID_INPUT = 5,
  /**
   * The requested slide is not in the manifest.
   */
  ISUP_STATUS_NOT_FOUND = 6,
  /**
   * An internal error was caught at the boundary.
   */
  ISUP_STATUS_INTERNAL = 7,
} IsupStatus;

/**
 * Loaded grader; create with [`isup_grader_load`], release with
 * [`isup_grader_free`].
 */
typedef struct IsupGrader IsupGrader;

/**
 * Grade of one slide.
 */
typedef struct IsupPrediction {
  /**
   * ISUP grade in 0..=5.
   */
  uint8_t grade;
  /**
   * Probability that the slide is not benign.
   */
  double malignancy;
  /**
   * Sigmoid outputs of the ordinal head (5) or class probabilities (6);
   * entries past `n_outputs` are zero.
   */
  double outputs[ISUP_MAX_OUTPUTS];
  size_t n_outputs;
  /**
   * Distinct patches that entered the bag.
   */
  size_t n_patches;
  /**
   * Patch with the largest summed attention, in tiling order.
   */
  size_t top_patch_index;
  /**
   * Top-left corner of that patch in slide pixels.
   */
  uint32_t top_patch_x;
  uint32_t top_patch_y;
  double top_attention;
} IsupPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a grader checkpoint. `bag_size` 0 selects the default of 36.
 *
 * # Safety
 * `checkpoint_path` must be a NUL-terminated string and `out` a valid
 * pointer; on success `*out` owns a handle for [`isup_grader_free`].
 */
enum IsupStatus isup_grader_load(const char *checkpoint_path,
                                 size_t bag_size,
                                 struct IsupGrader **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `grader` must come from [`isup_grader_load`] and not be used afterwards.
 */
void isup_grader_free(struct IsupGrader *grader);

/**
 * Side of the square patches the grader expects, or 0 for a null handle.
 *
 * # Safety
 * `grader` must be null or a live handle.
 */
size_t isup_grader_patch_size(const struct IsupGrader *grader);

/**
 * Tiles a row-major RGB slide of `width x height` pixels into patches and
 * grades it.
 *
 * # Safety
 * `rgb` must point to `width * height * 3` readable bytes; `grader` and
 * `out` must be valid.
 */
enum IsupStatus isup_grader_predict_rgb(const struct IsupGrader *grader,
                                        const uint8_t *rgb,
                                        size_t width,
                                        size_t height,
                                        struct IsupPrediction *out);

/**
 * Grades the slide `slide_id` of a tile manifest (`tiles.jsonl` or a split
 * manifest). Paths inside the manifest resolve against its directory.
 *
 * # Safety
 * String arguments must be NUL-terminated; `grader` and `out` must be valid.
 */
enum IsupStatus isup_grader_predict_manifest(const struct IsupGrader *grader,
                                             const char *manifest_path,
                                             const char *slide_id,
                                             struct IsupPrediction *out);

/**
 * Maps a Gleason pair (0 for benign, else 3..=5) to its ISUP grade.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum IsupStatus isup_grade_from_gleason(uint8_t primary, uint8_t secondary, uint8_t *out);

/**
 * Message of the last failed call on this thread, or null if none failed.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *isup_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *isup_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ISUP_GRADING_H */
