#ifndef WFWORLD_H
#define WFWORLD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define WF_MOVE_NONE 0

#define WF_MOVE_FORWARD 1

#define WF_MOVE_BACKWARD 2

#define WF_STRAFE_NONE 0

#define WF_STRAFE_LEFT 1

#define WF_STRAFE_RIGHT 2

#define WF_MODIFIER_NONE 0

#define WF_MODIFIER_SPRINT 1

#define WF_MODIFIER_SNEAK 2

#define WF_DECODING_AUTOREGRESSIVE 0

#define WF_DECODING_DIAGONAL 1

typedef enum WfStatus {
  WF_STATUS_OK = 0,
  WF_STATUS_NULL_ARGUMENT = 1,
  WF_STATUS_INVALID_ARGUMENT = 2,
  WF_STATUS_CONFIG = 3,
  WF_STATUS_DATA = 4,
  WF_STATUS_CONTEXT_EXCEEDED = 5,
  WF_STATUS_RUNTIME = 6,
  WF_STATUS_BUFFER_TOO_SMALL = 7,
  WF_STATUS_PANIC = 8,
} WfStatus;

/**
 * A loaded checkpoint and its codebook.
 */
typedef struct WfModel WfModel;

/**
 * One episode. Holds its own reference to the model.
 */
typedef struct WfSession WfSession;

typedef struct WfModelInfo {
  size_t frame_width;
  size_t frame_height;
  size_t grid_h;
  size_t grid_w;
  size_t vocab_size;
  size_t image_vocab_size;
  size_t max_positions;
  size_t parameter_count;
  /**
   * 1 when fine-tuned under the wavefront mask.
   */
  uint8_t wavefront;
} WfModelInfo;

/**
 * One player action. Flags are 0 or 1; camera deltas are degrees.
 */
typedef struct WfAction {
  uint8_t movement;
  uint8_t strafe;
  uint8_t modifier;
  uint8_t use_item;
  uint8_t attack;
  uint8_t jump;
  uint8_t drop;
  double camera_dx;
  double camera_dy;
} WfAction;

typedef struct WfStepInfo {
  uint64_t frame_index;
  /**
   * Forward passes spent on the frame's image tokens.
   */
  size_t iterations;
  double gen_ms;
  /**
   * The action that produced the frame (sampled when none was given).
   */
  struct WfAction action;
} WfStepInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static NUL-terminated string.
 */
const char *wf_version(void);

/**
 * Message of the last failure on this thread; empty if none. Valid until
 * the next failing call on the same thread.
 */
const char *wf_last_error(void);

/**
 * Exact wavefront speedup `h·w / (h+w−1)` as a reduced fraction.
 *
 * # Safety
 * `num` and `den` must be valid for writes.
 */
enum WfStatus wf_speedup_ratio(size_t h, size_t w, uint64_t *num, uint64_t *den);

/**
 * Loads a checkpoint and the codebook it was trained with.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be valid for writes.
 */
enum WfStatus wf_model_load(const char *checkpoint_path,
                            const char *codebook_path,
                            struct WfModel **out);

/**
 * # Safety
 * `model` must come from [`wf_model_load`] and not be used afterwards. Null is ignored.
 */
void wf_model_free(struct WfModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be valid for writes.
 */
enum WfStatus wf_model_info(const struct WfModel *model, struct WfModelInfo *out);

/**
 * Opens an episode on the world generated by `world_seed`. The prompt
 * frame is available through [`wf_session_frame`].
 *
 * # Safety
 * `model` must be a live handle; `out` must be valid for writes.
 */
enum WfStatus wf_session_new(const struct WfModel *model,
                             uint64_t world_seed,
                             uint8_t decoding,
                             struct WfSession **out);

/**
 * # Safety
 * `session` must come from [`wf_session_new`] and not be used afterwards. Null is ignored.
 */
void wf_session_free(struct WfSession *session);

/**
 * Copies the current frame (row-major RGB, `frame_width·frame_height·3`
 * bytes) into `rgb`.
 *
 * # Safety
 * `session` must be a live handle; `rgb` must be valid for `rgb_len` bytes.
 */
enum WfStatus wf_session_frame(const struct WfSession *session, uint8_t *rgb, size_t rgb_len);

/**
 * Frames that still fit in the session's context.
 *
 * # Safety
 * `session` must be a live handle; `out` must be valid for writes.
 */
enum WfStatus wf_session_remaining(const struct WfSession *session, size_t *out);

/**
 * Generates the next frame. With `action` null the model chooses the
 * action itself. `rgb` receives the frame; `info` may be null.
 *
 * # Safety
 * `session` must be a live handle; `action` null or valid; `rgb` valid for
 * `rgb_len` bytes; `info` null or valid for writes.
 */
enum WfStatus wf_session_step(struct WfSession *session,
                              const struct WfAction *action,
                              uint8_t *rgb,
                              size_t rgb_len,
                              struct WfStepInfo *info);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* WFWORLD_H */
