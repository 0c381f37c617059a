//! C ABI over the evfuse toolkit.
//!
//! Every fallible function returns an [`EvfStatus`]; on failure the message
//! is available from [`evf_last_error`] on the same thread. Handles are
//! opaque, owned by the caller after a successful `*_open` / `*_load`, and
//! released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use evfuse::checkpoint::load_model;
use evfuse::detector::{detect, DetectMode, ToyModel};
use evfuse::event::{evt1, voxelize, Event, EventStream, EventTensor, Polarity, VoxelSpec, Window};
use evfuse::io::GrayImage;
use evfuse::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvfStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// An argument violated the call's contract.
    InvalidArgument = 2,
    /// Input data (file or buffer contents) was malformed.
    InvalidData = 3,
    Io = 4,
    /// The output buffer was too small; the required size was reported.
    BufferTooSmall = 5,
    /// An internal panic was caught at the boundary.
    Internal = 6,
}

/// Detector mode accepted by [`evf_detect`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvfMode {
    Fused = 0,
    EventOnly = 1,
}

/// One detection; the box is `[x_min, y_min, x_max, y_max]` in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvfDetection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub class_id: u32,
    /// Timestamp in microseconds (the window end).
    pub t: i64,
}

/// Opaque event stream.
pub struct EvfStream(EventStream);

/// Opaque trained detector.
pub struct EvfModel(ToyModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> EvfStatus {
    match e {
        Error::Argument(_) | Error::State(_) | Error::Training(_) => EvfStatus::InvalidArgument,
        Error::Data(_) | Error::Json { .. } => EvfStatus::InvalidData,
        Error::Io { .. } => EvfStatus::Io,
    }
}

fn fail(status: EvfStatus, msg: &str) -> EvfStatus {
    set_error(msg);
    status
}

/// Run `f`, recording its error and converting panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), (EvfStatus, String)>) -> EvfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EvfStatus::Ok
        }
        Ok(Err((s, m))) => fail(s, &m),
        Err(_) => fail(EvfStatus::Internal, "internal panic"),
    }
}

fn lib_err(e: Error) -> (EvfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (EvfStatus, String) {
    (EvfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (EvfStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (EvfStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (EvfStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the most recent fallible call on this thread, empty when it
/// succeeded. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn evf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Read an EVT1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn evf_stream_open(path: *const c_char, out: *mut *mut EvfStream) -> EvfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path)?;
        let s = evt1::read_file(&p).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(EvfStream(s)));
        Ok(())
    })
}

/// Build a stream from parallel arrays; events are sorted by time if needed.
/// Polarities must be -1 or +1.
///
/// # Safety
/// Each array must hold `n` elements (or be null when `n` is 0) and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn evf_stream_from_events(
    width: u16,
    height: u16,
    xs: *const u16,
    ys: *const u16,
    ts: *const i64,
    ps: *const i8,
    n: usize,
    out: *mut *mut EvfStream,
) -> EvfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (xs, ys, ts, ps) = (slice(xs, n, "xs")?, slice(ys, n, "ys")?, slice(ts, n, "ts")?, slice(ps, n, "ps")?);
        let mut events = Vec::with_capacity(n);
        for i in 0..n {
            let p = Polarity::from_sign(ps[i]).map_err(lib_err)?;
            events.push(Event::new(xs[i], ys[i], ts[i], p));
        }
        let s = EventStream::from_unsorted(width, height, events).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(EvfStream(s)));
        Ok(())
    })
}

/// Number of events, or 0 for a null handle.
///
/// # Safety
/// `stream` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn evf_stream_len(stream: *const EvfStream) -> usize {
    stream.as_ref().map_or(0, |s| s.0.len())
}

/// Sensor size of a stream.
///
/// # Safety
/// `stream` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn evf_stream_sensor(stream: *const EvfStream, width: *mut u16, height: *mut u16) -> EvfStatus {
    guard(|| {
        let s = stream.as_ref().ok_or_else(|| null("stream"))?;
        if width.is_null() || height.is_null() {
            return Err(null("width/height"));
        }
        *width = s.0.sensor_w();
        *height = s.0.sensor_h();
        Ok(())
    })
}

/// Release a stream; null is ignored.
///
/// # Safety
/// `stream` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evf_stream_free(stream: *mut EvfStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Count events of `[t1, t2)` into `out`, laid out `(2, bins, height, width)`
/// with the negative channel first. `out_len` must equal
/// `2 * bins * height * width`.
///
/// # Safety
/// `stream` must be a live handle and `out` hold `out_len` elements.
#[no_mangle]
pub unsafe extern "C" fn evf_voxelize(
    stream: *const EvfStream,
    t1: i64,
    t2: i64,
    bins: u32,
    out: *mut u32,
    out_len: usize,
) -> EvfStatus {
    guard(|| {
        let s = stream.as_ref().ok_or_else(|| null("stream"))?;
        let spec = VoxelSpec::new(bins as usize, s.0.sensor_h().into(), s.0.sensor_w().into()).map_err(lib_err)?;
        if out_len != spec.numel() {
            return Err((
                EvfStatus::BufferTooSmall,
                format!("output holds {out_len} values, tensor needs {}", spec.numel()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let window = Window::new(t1, t2).map_err(lib_err)?;
        let t = voxelize(&s.0, window, spec).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(t.data());
        Ok(())
    })
}

/// Load a model checkpoint (either the `.bin` or the `.json` path).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn evf_model_load(path: *const c_char, out: *mut *mut EvfModel) -> EvfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path)?;
        let m = load_model(&p).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(EvfModel(m)));
        Ok(())
    })
}

/// Input shape expected by [`evf_detect`]: time bins and sensor size.
///
/// # Safety
/// `model` must be a live handle; the outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn evf_model_input_shape(
    model: *const EvfModel,
    bins: *mut u32,
    height: *mut u32,
    width: *mut u32,
) -> EvfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if bins.is_null() || height.is_null() || width.is_null() {
            return Err(null("bins/height/width"));
        }
        let c = &m.0.config;
        *bins = c.time_bins as u32;
        *height = c.height as u32;
        *width = c.width as u32;
        Ok(())
    })
}

/// Release a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evf_model_free(model: *mut EvfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Run the detector on an event tensor of window `[t1, t2)` and a frame of
/// linear intensities in `[0, 1]`, row-major `height x width`.
///
/// `*n_out` receives the number of detections. When it exceeds `capacity`
/// the first `capacity` are written and `BufferTooSmall` is returned.
///
/// # Safety
/// `counts` must hold `counts_len` values, `frame` `frame_len` values and
/// `out` `capacity` entries (or be null when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn evf_detect(
    model: *const EvfModel,
    counts: *const u32,
    counts_len: usize,
    t1: i64,
    t2: i64,
    frame: *const f64,
    frame_len: usize,
    mode: i32,
    out: *mut EvfDetection,
    capacity: usize,
    n_out: *mut usize,
) -> EvfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n_out.is_null() {
            return Err(null("n_out"));
        }
        let mode = match mode {
            0 => DetectMode::Fused,
            1 => DetectMode::EventOnly,
            other => return Err((EvfStatus::InvalidArgument, format!("unknown mode {other}"))),
        };
        let c = &m.0.config;
        let spec = VoxelSpec::new(c.time_bins, c.height, c.width).map_err(lib_err)?;
        let window = Window::new(t1, t2).map_err(lib_err)?;
        let tensor = EventTensor::from_raw(spec, window, slice(counts, counts_len, "counts")?.to_vec()).map_err(lib_err)?;
        let image = GrayImage {
            width: c.width,
            height: c.height,
            pixels: slice(frame, frame_len, "frame")?.to_vec(),
        };
        if image.pixels.len() != c.width * c.height {
            return Err((
                EvfStatus::InvalidArgument,
                format!("frame holds {} values, model needs {}", image.pixels.len(), c.width * c.height),
            ));
        }
        let dets = detect(&m.0, &tensor, &image, mode).map_err(lib_err)?;
        *n_out = dets.len();
        if capacity > 0 && out.is_null() {
            return Err(null("out"));
        }
        let dst = if capacity == 0 { &mut [][..] } else { std::slice::from_raw_parts_mut(out, capacity) };
        for (d, o) in dets.iter().zip(dst.iter_mut()) {
            *o = EvfDetection {
                x_min: d.bbox.x_min,
                y_min: d.bbox.y_min,
                x_max: d.bbox.x_max,
                y_max: d.bbox.y_max,
                score: d.score,
                class_id: d.class_id,
                t: d.t,
            };
        }
        if dets.len() > capacity {
            return Err((
                EvfStatus::BufferTooSmall,
                format!("{} detections, buffer holds {capacity}", dets.len()),
            ));
        }
        Ok(())
    })
}
