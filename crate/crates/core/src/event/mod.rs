//! Event streams, half-open time windows, frequency slicing and voxelization.

pub mod evt1;
pub mod vox1;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Microsecond timestamp.
pub type Micros = i64;

/// Sign of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_sign(p: i8) -> Result<Self> {
        match p {
            -1 => Ok(Polarity::Negative),
            1 => Ok(Polarity::Positive),
            other => Err(Error::arg(format!("polarity must be -1 or +1, got {other}"))),
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    /// Tensor channel: negative events go to 0, positive to 1.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Positive => Polarity::Negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: Micros,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: Micros, p: Polarity) -> Self {
        Event { x, y, t, p }
    }
}

/// Time-ordered events from one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    sensor_w: u16,
    sensor_h: u16,
}

impl EventStream {
    /// Build a stream, rejecting unsorted timestamps and out-of-bounds pixels.
    pub fn new(sensor_w: u16, sensor_h: u16, events: Vec<Event>) -> Result<Self> {
        if sensor_w == 0 || sensor_h == 0 {
            return Err(Error::arg("sensor dimensions must be positive"));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= sensor_w || e.y >= sensor_h {
                return Err(Error::arg(format!(
                    "event {i} at ({}, {}) outside {sensor_w}x{sensor_h} sensor",
                    e.x, e.y
                )));
            }
        }
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::arg(format!(
                "events not sorted by timestamp at index {}",
                i + 1
            )));
        }
        Ok(EventStream {
            events,
            sensor_w,
            sensor_h,
        })
    }

    /// Build a stream from unordered events; sorting is stable on equal timestamps.
    pub fn from_unsorted(sensor_w: u16, sensor_h: u16, mut events: Vec<Event>) -> Result<Self> {
        events.sort_by_key(|e| e.t);
        Self::new(sensor_w, sensor_h, events)
    }

    pub fn empty(sensor_w: u16, sensor_h: u16) -> Self {
        EventStream {
            events: Vec::new(),
            sensor_w,
            sensor_h,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn sensor_w(&self) -> u16 {
        self.sensor_w
    }

    pub fn sensor_h(&self) -> u16 {
        self.sensor_h
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The contiguous run of events with `t1 <= t < t2`.
    pub fn in_window(&self, window: Window) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < window.t1);
        let hi = self.events.partition_point(|e| e.t < window.t2);
        &self.events[lo..hi]
    }
}

/// Half-open time interval `[t1, t2)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub t1: Micros,
    pub t2: Micros,
}

impl Window {
    pub fn new(t1: Micros, t2: Micros) -> Result<Self> {
        if t1 >= t2 {
            return Err(Error::arg(format!("window requires t1 < t2, got [{t1}, {t2})")));
        }
        Ok(Window { t1, t2 })
    }

    pub fn len(&self) -> Micros {
        self.t2 - self.t1
    }

    pub fn contains(&self, t: Micros) -> bool {
        self.t1 <= t && t < self.t2
    }

    fn validate(&self) -> Result<()> {
        Window::new(self.t1, self.t2).map(|_| ())
    }
}

/// Temporal and spatial resolution of an event tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
}

impl VoxelSpec {
    pub fn new(bins: usize, height: usize, width: usize) -> Result<Self> {
        let spec = VoxelSpec {
            bins,
            height,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::arg(format!(
                "voxel spec dimensions must be positive, got T={} H={} W={}",
                self.bins, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        2 * self.bins * self.height * self.width
    }
}

/// Dense `(2, T, H, W)` event counts for one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTensor {
    data: Vec<u32>,
    spec: VoxelSpec,
    window: Window,
}

impl EventTensor {
    pub fn zeros(spec: VoxelSpec, window: Window) -> Self {
        EventTensor {
            data: vec![0; spec.numel()],
            spec,
            window,
        }
    }

    pub fn from_raw(spec: VoxelSpec, window: Window, data: Vec<u32>) -> Result<Self> {
        spec.validate()?;
        window.validate()?;
        if data.len() != spec.numel() {
            return Err(Error::data(format!(
                "tensor has {} entries, spec requires {}",
                data.len(),
                spec.numel()
            )));
        }
        Ok(EventTensor { data, spec, window })
    }

    pub fn spec(&self) -> VoxelSpec {
        self.spec
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn index(&self, channel: usize, bin: usize, y: usize, x: usize) -> usize {
        ((channel * self.spec.bins + bin) * self.spec.height + y) * self.spec.width + x
    }

    pub fn get(&self, channel: usize, bin: usize, y: usize, x: usize) -> u32 {
        self.data[self.index(channel, bin, y, x)]
    }

    pub fn total(&self) -> u64 {
        self.data.iter().map(|&c| u64::from(c)).sum()
    }

    /// Sum over the time axis, giving a `(2, H, W)` count map.
    pub fn collapse_bins(&self) -> Vec<u32> {
        let hw = self.spec.height * self.spec.width;
        let mut out = vec![0u32; 2 * hw];
        for c in 0..2 {
            for b in 0..self.spec.bins {
                let base = (c * self.spec.bins + b) * hw;
                for i in 0..hw {
                    out[c * hw + i] += self.data[base + i];
                }
            }
        }
        out
    }
}

/// Labeled base frequency and the integer multiple used for sub-windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyPlan {
    pub base_hz: u32,
    pub high_hz: u32,
}

impl FrequencyPlan {
    pub fn new(base_hz: u32, high_hz: u32) -> Result<Self> {
        let plan = FrequencyPlan { base_hz, high_hz };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_hz == 0 || self.high_hz == 0 {
            return Err(Error::arg("frequencies must be positive"));
        }
        if !self.high_hz.is_multiple_of(self.base_hz) {
            return Err(Error::arg(format!(
                "high frequency {} Hz is not an integer multiple of base {} Hz",
                self.high_hz, self.base_hz
            )));
        }
        Ok(())
    }

    pub fn ratio(&self) -> usize {
        (self.high_hz / self.base_hz) as usize
    }
}

// Events above this count are voxelized in parallel chunks.
const PARALLEL_THRESHOLD: usize = 1 << 18;

#[inline]
fn bin_of(t: Micros, window: Window, bins: usize) -> usize {
    let num = i128::from(t - window.t1) * bins as i128;
    let b = (num / i128::from(window.len())) as usize;
    b.min(bins - 1)
}

fn accumulate(events: &[Event], window: Window, spec: VoxelSpec, data: &mut [u32]) {
    let hw = spec.height * spec.width;
    for e in events {
        let b = bin_of(e.t, window, spec.bins);
        let idx = (e.p.channel() * spec.bins + b) * hw + e.y as usize * spec.width + e.x as usize;
        data[idx] += 1;
    }
}

/// Count in-window events into a `(2, T, H, W)` tensor.
///
/// The bin of an event is `floor((t - t1) / (t2 - t1) * T)` computed in exact
/// integer arithmetic and clamped to `T - 1`.
pub fn voxelize(stream: &EventStream, window: Window, spec: VoxelSpec) -> Result<EventTensor> {
    window.validate()?;
    spec.validate()?;
    if spec.width != stream.sensor_w as usize || spec.height != stream.sensor_h as usize {
        return Err(Error::arg(format!(
            "voxel spec {}x{} does not match sensor {}x{}",
            spec.width, spec.height, stream.sensor_w, stream.sensor_h
        )));
    }
    let events = stream.in_window(window);
    let mut tensor = EventTensor::zeros(spec, window);
    if events.len() < PARALLEL_THRESHOLD {
        accumulate(events, window, spec, &mut tensor.data);
    } else {
        let chunk = events.len().div_ceil(rayon::current_num_threads().max(1));
        let partials: Vec<Vec<u32>> = events
            .par_chunks(chunk)
            .map(|part| {
                let mut local = vec![0u32; spec.numel()];
                accumulate(part, window, spec, &mut local);
                local
            })
            .collect();
        for part in partials {
            for (d, p) in tensor.data.iter_mut().zip(part) {
                *d += p;
            }
        }
    }
    Ok(tensor)
}

/// Split `window` into `plan.ratio()` consecutive sub-windows.
///
/// When the window length is not divisible by the ratio, the trailing
/// sub-windows are one microsecond longer.
pub fn slice_frequencies(window: Window, plan: FrequencyPlan) -> Result<Vec<Window>> {
    window.validate()?;
    plan.validate()?;
    split_window(window, plan.ratio())
}

/// Same as [`slice_frequencies`] with an explicit part count.
pub fn split_window(window: Window, parts: usize) -> Result<Vec<Window>> {
    window.validate()?;
    if parts == 0 {
        return Err(Error::arg("cannot split a window into zero parts"));
    }
    let len = window.len();
    let parts_i = parts as i64;
    if len < parts_i {
        return Err(Error::arg(format!(
            "window of {len} us cannot be split into {parts} non-empty parts"
        )));
    }
    let q = len / parts_i;
    let rem = (len % parts_i) as usize;
    let mut out = Vec::with_capacity(parts);
    let mut start = window.t1;
    for i in 0..parts {
        let extra = i64::from(i >= parts - rem);
        let end = start + q + extra;
        out.push(Window { t1: start, t2: end });
        start = end;
    }
    debug_assert_eq!(start, window.t2);
    Ok(out)
}

/// Pick one sub-window uniformly at random.
pub fn sample_subwindow<R: rand::Rng + ?Sized>(windows: &[Window], rng: &mut R) -> Result<Window> {
    if windows.is_empty() {
        return Err(Error::arg("cannot sample from an empty window list"));
    }
    Ok(windows[rng.random_range(0..windows.len())])
}

/// The sub-window ending at the labeled timestamp.
pub fn last_subwindow(windows: &[Window]) -> Result<Window> {
    windows
        .last()
        .copied()
        .ok_or_else(|| Error::arg("empty window list has no last sub-window"))
}

/// Time-reverse the events of `window`.
///
/// Each in-window timestamp is reflected as `t1 + (t2 - 1 - t)`; when
/// `flip_polarity` is set the polarity is negated as well. Events outside
/// the window are dropped. Applying the reversal twice restores the input.
pub fn reverse_stream(stream: &EventStream, window: Window, flip_polarity: bool) -> Result<EventStream> {
    window.validate()?;
    let events = stream
        .in_window(window)
        .iter()
        .rev()
        .map(|e| Event {
            t: window.t1 + (window.t2 - 1 - e.t),
            p: if flip_polarity { e.p.flipped() } else { e.p },
            ..*e
        })
        .collect();
    Ok(EventStream {
        events,
        sensor_w: stream.sensor_w,
        sensor_h: stream.sensor_h,
    })
}
