#ifndef EVFUSE_H
#define EVFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Detector mode accepted by [`evf_detect`].
typedef enum EvfMode {
  EVF_MODE_FUSED = 0,
  EVF_MODE_EVENT_ONLY = 1,
} EvfMode;

// Result code of every fallible call.
typedef enum EvfStatus {
  EVF_STATUS_OK = 0,
  // A required pointer was null.
  EVF_STATUS_NULL_POINTER = 1,
  // An argument violated the call's contract.
  EVF_STATUS_INVALID_ARGUMENT = 2,
  // Input data (file or buffer contents) was malformed.
  EVF_STATUS_INVALID_DATA = 3,
  EVF_STATUS_IO = 4,
  // The output buffer was too small; the required size was reported.
  EVF_STATUS_BUFFER_TOO_SMALL = 5,
  // An internal panic was caught at the boundary.
  EVF_STATUS_INTERNAL = 6,
} EvfStatus;

// Opaque trained detector.
typedef struct EvfModel EvfModel;

// Opaque event stream.
typedef struct EvfStream EvfStream;

// One detection; the box is `[x_min, y_min, x_max, y_max]` in pixels.
typedef struct EvfDetection {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
  double score;
  uint32_t class_id;
  // Timestamp in microseconds (the window end).
  int64_t t;
} EvfDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent fallible call on this thread, empty when it
// succeeded. The pointer stays valid until the next call on this thread.
const char *evf_last_error(void);

// Read an EVT1 file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EvfStatus evf_stream_open(const char *path, struct EvfStream **out);

// Build a stream from parallel arrays; events are sorted by time if needed.
// Polarities must be -1 or +1.
//
// # Safety
// Each array must hold `n` elements (or be null when `n` is 0) and `out`
// must be a valid pointer.
enum EvfStatus evf_stream_from_events(uint16_t width,
                                      uint16_t height,
                                      const uint16_t *xs,
                                      const uint16_t *ys,
                                      const int64_t *ts,
                                      const int8_t *ps,
                                      uintptr_t n,
                                      struct EvfStream **out);

// Number of events, or 0 for a null handle.
//
// # Safety
// `stream` must be null or a live handle.
uintptr_t evf_stream_len(const struct EvfStream *stream);

// Sensor size of a stream.
//
// # Safety
// `stream` must be a live handle; `width` and `height` valid pointers.
enum EvfStatus evf_stream_sensor(const struct EvfStream *stream, uint16_t *width, uint16_t *height);

// Release a stream; null is ignored.
//
// # Safety
// `stream` must be null or a handle not yet freed.
void evf_stream_free(struct EvfStream *stream);

// Count events of `[t1, t2)` into `out`, laid out `(2, bins, height, width)`
// with the negative channel first. `out_len` must equal
// `2 * bins * height * width`.
//
// # Safety
// `stream` must be a live handle and `out` hold `out_len` elements.
enum EvfStatus evf_voxelize(const struct EvfStream *stream,
                            int64_t t1,
                            int64_t t2,
                            uint32_t bins,
                            uint32_t *out,
                            uintptr_t out_len);

// Load a model checkpoint (either the `.bin` or the `.json` path).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EvfStatus evf_model_load(const char *path, struct EvfModel **out);

// Input shape expected by [`evf_detect`]: time bins and sensor size.
//
// # Safety
// `model` must be a live handle; the outputs valid pointers.
enum EvfStatus evf_model_input_shape(const struct EvfModel *model,
                                     uint32_t *bins,
                                     uint32_t *height,
                                     uint32_t *width);

// Release a model; null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void evf_model_free(struct EvfModel *model);

// Run the detector on an event tensor of window `[t1, t2)` and a frame of
// linear intensities in `[0, 1]`, row-major `height x width`.
//
// `*n_out` receives the number of detections. When it exceeds `capacity`
// the first `capacity` are written and `BufferTooSmall` is returned.
//
// # Safety
// `counts` must hold `counts_len` values, `frame` `frame_len` values and
// `out` `capacity` entries (or be null when `capacity` is 0).
enum EvfStatus evf_detect(const struct EvfModel *model,
                          const uint32_t *counts,
                          uintptr_t counts_len,
                          int64_t t1,
                          int64_t t2,
                          const double *frame,
                          uintptr_t frame_len,
                          int32_t mode,
                          struct EvfDetection *out,
                          uintptr_t capacity,
                          uintptr_t *n_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVFUSE_H */
