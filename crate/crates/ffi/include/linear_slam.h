#ifndef LINEAR_SLAM_H
#define LINEAR_SLAM_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum LsEntityKind {
  LS_ENTITY_KIND_POSE = 0,
  LS_ENTITY_KIND_FEATURE = 1,
} LsEntityKind;

typedef enum LsStatus {
  LS_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, undersized buffer or rejected parameter.
   */
  LS_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Malformed or invalid file content. `ls_last_error_line` gives the line.
   */
  LS_STATUS_PARSE = 2,
  LS_STATUS_IO = 3,
  /**
   * Singular system, degenerate frame or failed convergence.
   */
  LS_STATUS_NUMERIC = 4,
  /**
   * The maps share no usable common elements or disagree on their frames.
   */
  LS_STATUS_NOT_JOINABLE = 5,
  /**
   * An internal panic was caught.
   */
  LS_STATUS_INTERNAL = 6,
} LsStatus;

typedef enum LsStrategy {
  LS_STRATEGY_SEQUENTIAL = 0,
  LS_STRATEGY_DIVIDE_CONQUER = 1,
} LsStrategy;

/**
 * Opaque local map handle.
 */
typedef struct LsMap LsMap;

/**
 * Operation counts relative to a batch nonlinear solve.
 */
typedef struct LsComplexity {
  double local_build;
  double seq_join;
  double seq_total;
  double dc_join;
  double dc_total;
  double nonlinear_seq_join;
  double nonlinear_seq_total;
  double nonlinear_dc_join;
  double nonlinear_dc_total;
} LsComplexity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null if the last
 * call succeeded. Valid until the next call on the same thread.
 */
const char *ls_last_error(void);

/**
 * Input line of the last parse failure on this thread, or 0.
 */
size_t ls_last_error_line(void);

/**
 * Reads a local map file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LsStatus ls_map_read(const char *path, struct LsMap **out);

/**
 * Parses a local map from `len` bytes of text.
 *
 * # Safety
 * `text` must point to `len` readable bytes and `out` must be writable.
 */
enum LsStatus ls_map_parse(const uint8_t *text, size_t len, struct LsMap **out);

/**
 * Writes a map to a file in the text format.
 *
 * # Safety
 * `map` must be a live handle and `path` a NUL-terminated string.
 */
enum LsStatus ls_map_write(const struct LsMap *map, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `map` must be null or a handle not yet freed.
 */
void ls_map_free(struct LsMap *map);

/**
 * Spatial dimension of the map (2 or 3), or 0 for a null handle.
 *
 * # Safety
 * `map` must be null or a live handle.
 */
uint32_t ls_map_dim(const struct LsMap *map);

/**
 * Number of entities (poses and features) in the estimate.
 *
 * # Safety
 * `map` must be null or a live handle.
 */
size_t ls_map_entity_count(const struct LsMap *map);

/**
 * Total number of scalar coordinates in the estimate.
 *
 * # Safety
 * `map` must be null or a live handle.
 */
size_t ls_map_state_len(const struct LsMap *map);

/**
 * Writes the entities defining the map frame to `ids` (room for three) and
 * their number to `count`. `is_pose` tells whether the frame is a pose frame
 * (one pose id) or a feature frame (two or three feature ids).
 *
 * # Safety
 * `map` must be a live handle, `ids` writable for three values and the
 * other output pointers writable.
 */
enum LsStatus ls_map_frame(const struct LsMap *map, bool *is_pose, uint64_t *ids, size_t *count);

/**
 * Describes entity `index`: its kind, id, offset in the estimate vector and
 * number of coordinates.
 *
 * # Safety
 * `map` must be a live handle and the output pointers writable.
 */
enum LsStatus ls_map_entity(const struct LsMap *map,
                            size_t index,
                            enum LsEntityKind *kind,
                            uint64_t *id,
                            size_t *offset,
                            size_t *len);

/**
 * Copies the estimate into `buf`, which must hold `ls_map_state_len` values.
 *
 * # Safety
 * `map` must be a live handle and `buf` writable for `len` doubles.
 */
enum LsStatus ls_map_estimate(const struct LsMap *map, double *buf, size_t len);

/**
 * Copies the dense information matrix, row-major, into `buf`, which must
 * hold the square of `ls_map_state_len` values.
 *
 * # Safety
 * `map` must be a live handle and `buf` writable for `len` doubles.
 */
enum LsStatus ls_map_information(const struct LsMap *map, double *buf, size_t len);

/**
 * Joins two maps after bringing them into a common frame. The result is
 * expressed in the frame of the newest pose of `m2` when the maps hold
 * poses, otherwise in a frame built from their common features.
 *
 * # Safety
 * `m1` and `m2` must be live handles and `out` writable.
 */
enum LsStatus ls_join(const struct LsMap *m1, const struct LsMap *m2, struct LsMap **out);

/**
 * Joins `count` maps with the given strategy. `threads` bounds the
 * parallelism of the divide and conquer strategy; 0 means one thread.
 *
 * # Safety
 * `maps` must point to `count` live handles and `out` must be writable.
 */
enum LsStatus ls_join_all(const struct LsMap *const *maps,
                          size_t count,
                          enum LsStrategy strategy,
                          size_t threads,
                          struct LsMap **out);

/**
 * Weighted squared residual of `solution` against `count` local maps.
 *
 * # Safety
 * `solution` and each of `maps` must be live handles and `out` writable.
 */
enum LsStatus ls_chi2(const struct LsMap *solution,
                      const struct LsMap *const *maps,
                      size_t count,
                      double *out);

/**
 * Evaluates the operation-count model for `n` maps, `og` observations,
 * `sg` state entities and `m` nonlinear iterations.
 *
 * # Safety
 * `out` must be writable.
 */
enum LsStatus ls_complexity(double og, double sg, double m, uint64_t n, struct LsComplexity *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ls_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LINEAR_SLAM_H */
