//! Synthetic event scenes: moving rectangles over a uniform background.
//!
//! Per-pixel log intensity is simulated on a fixed micro-step grid. A pixel
//! keeps a reference level; whenever the current log intensity differs from
//! it by `k * C` or more, `k` events of the matching sign are emitted and the
//! reference moves by `k * C`, carrying the residual forward.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Micros, Polarity, Window};
use crate::io::GrayImage;
use crate::seed;

pub const DEFAULT_MICRO_STEP_US: Micros = 100;

fn default_micro_step() -> Micros {
    DEFAULT_MICRO_STEP_US
}

/// Position of an object's top-left corner at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: Micros,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: u32,
    /// `[w, h]` in pixels.
    pub size: [f64; 2],
    /// Piecewise-linear path; held constant before the first and after the last knot.
    pub trajectory: Vec<Knot>,
    /// Linear surface intensity (the background has `background_intensity`).
    pub intensity: f64,
    pub spawn_t: Micros,
    pub despawn_t: Micros,
}

impl ObjectSpec {
    pub fn position(&self, t: Micros) -> (f64, f64) {
        let k = &self.trajectory;
        if t <= k[0].t {
            return (k[0].x, k[0].y);
        }
        let last = k[k.len() - 1];
        if t >= last.t {
            return (last.x, last.y);
        }
        let i = k.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (k[i], k[i + 1]);
        let f = (t - a.t) as f64 / (b.t - a.t) as f64;
        (a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f)
    }

    pub fn alive(&self, t: Micros) -> bool {
        self.spawn_t <= t && t < self.despawn_t
    }

    /// Unclipped box at `t`.
    pub fn raw_box(&self, t: Micros) -> BBox {
        let (x, y) = self.position(t);
        BBox {
            x_min: x,
            y_min: y,
            x_max: x + self.size[0],
            y_max: y + self.size[1],
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let ctx = |msg: String| Error::arg(format!("object {index}: {msg}"));
        if self.spawn_t >= self.despawn_t {
            return Err(ctx(format!(
                "spawn_t {} must be < despawn_t {}",
                self.spawn_t, self.despawn_t
            )));
        }
        if !(self.size[0] > 0.0 && self.size[1] > 0.0) {
            return Err(ctx("size must be positive".into()));
        }
        if !(self.intensity > 0.0 && self.intensity.is_finite()) {
            return Err(ctx("intensity must be positive and finite".into()));
        }
        if self.trajectory.is_empty() {
            return Err(ctx("trajectory needs at least one knot".into()));
        }
        if self.trajectory.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(ctx("trajectory knots must have strictly increasing t".into()));
        }
        if self
            .trajectory
            .iter()
            .any(|k| !k.x.is_finite() || !k.y.is_finite())
        {
            return Err(ctx("trajectory positions must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub sensor_w: u16,
    pub sensor_h: u16,
    pub duration: Micros,
    pub frame_hz: u32,
    pub contrast_threshold: f64,
    pub objects: Vec<ObjectSpec>,
    pub background_intensity: f64,
    /// Spurious events per pixel per second.
    pub noise_rate: f64,
    pub seed: u64,
    #[serde(default = "default_micro_step")]
    pub micro_step_us: Micros,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sensor_w == 0 || self.sensor_h == 0 {
            return Err(Error::arg("sensor dimensions must be positive"));
        }
        if self.duration <= 0 {
            return Err(Error::arg("duration must be positive"));
        }
        if self.frame_hz == 0 {
            return Err(Error::arg("frame_hz must be positive"));
        }
        if 1_000_000 % self.frame_hz != 0 {
            return Err(Error::arg(format!(
                "frame_hz {} does not give an integer microsecond period",
                self.frame_hz
            )));
        }
        if !(self.contrast_threshold > 0.0 && self.contrast_threshold.is_finite()) {
            return Err(Error::arg("contrast_threshold must be positive"));
        }
        if !(self.background_intensity > 0.0 && self.background_intensity.is_finite()) {
            return Err(Error::arg("background_intensity must be positive"));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::arg("noise_rate must be >= 0"));
        }
        if self.micro_step_us <= 0 {
            return Err(Error::arg("micro_step_us must be positive"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.validate(i)?;
        }
        Ok(())
    }

    pub fn frame_period(&self) -> Micros {
        1_000_000 / Micros::from(self.frame_hz)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: Micros,
    /// Linear intensity image.
    pub image: GrayImage,
}

#[derive(Debug, Clone)]
pub struct SceneSequence {
    pub config: SceneConfig,
    pub events: EventStream,
    pub frames: Vec<Frame>,
}

impl SceneSequence {
    /// Ground-truth boxes of every object alive at `t`, clipped to the sensor.
    pub fn gt_at(&self, t: Micros) -> Result<Vec<GroundTruthBox>> {
        if t < 0 || t > self.config.duration {
            return Err(Error::arg(format!(
                "t = {t} outside scene [0, {}]",
                self.config.duration
            )));
        }
        Ok(boxes_at(&self.config, t))
    }

    /// Index of the latest frame with timestamp `<= t`.
    pub fn frame_index_at_or_before(&self, t: Micros) -> Option<usize> {
        let n = self.frames.partition_point(|f| f.t <= t);
        n.checked_sub(1)
    }

    pub fn frame_at_or_before(&self, t: Micros) -> Option<&Frame> {
        self.frame_index_at_or_before(t).map(|i| &self.frames[i])
    }

    /// Labeled intervals `[t_{k-1}, t_k)` between consecutive frames.
    pub fn labeled_windows(&self) -> Vec<Window> {
        self.frames
            .windows(2)
            .map(|f| Window {
                t1: f[0].t,
                t2: f[1].t,
            })
            .collect()
    }

    /// Linear intensity at `t` (same renderer as the frames).
    pub fn render(&self, t: Micros) -> GrayImage {
        let mut img = vec![0.0; self.config.sensor_w as usize * self.config.sensor_h as usize];
        render_into(&self.config, t, &mut img);
        GrayImage {
            width: self.config.sensor_w as usize,
            height: self.config.sensor_h as usize,
            pixels: img,
        }
    }
}

pub(crate) fn boxes_at(config: &SceneConfig, t: Micros) -> Vec<GroundTruthBox> {
    let (w, h) = (f64::from(config.sensor_w), f64::from(config.sensor_h));
    config
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.alive(t))
        .filter_map(|(i, o)| {
            o.raw_box(t).clip(w, h).map(|bbox| GroundTruthBox {
                bbox,
                class_id: o.class_id,
                track_id: i as u64,
            })
        })
        .collect()
}

fn render_into(config: &SceneConfig, t: Micros, img: &mut [f64]) {
    let w = config.sensor_w as usize;
    let h = config.sensor_h as usize;
    img.fill(config.background_intensity);
    for o in config.objects.iter().filter(|o| o.alive(t)) {
        let b = o.raw_box(t);
        let x0 = b.x_min.floor().max(0.0) as usize;
        let y0 = b.y_min.floor().max(0.0) as usize;
        let x1 = (b.x_max.ceil().max(0.0) as usize).min(w);
        let y1 = (b.y_max.ceil().max(0.0) as usize).min(h);
        for py in y0..y1 {
            let cy = (b.y_max.min(py as f64 + 1.0) - b.y_min.max(py as f64)).max(0.0);
            if cy == 0.0 {
                continue;
            }
            for px in x0..x1 {
                let cx = (b.x_max.min(px as f64 + 1.0) - b.x_min.max(px as f64)).max(0.0);
                let cov = cx * cy;
                if cov > 0.0 {
                    let v = &mut img[py * w + px];
                    *v = *v * (1.0 - cov) + o.intensity * cov;
                }
            }
        }
    }
}

/// Simulate the scene and emit events, frames and the ground-truth oracle.
pub fn generate_scene(config: &SceneConfig) -> Result<SceneSequence> {
    config.validate()?;
    let w = config.sensor_w as usize;
    let h = config.sensor_h as usize;
    let c = config.contrast_threshold;
    let step = config.micro_step_us;

    let mut lin = vec![0.0; w * h];
    render_into(config, 0, &mut lin);
    let mut log_now: Vec<f64> = lin.iter().map(|v| v.ln()).collect();
    let mut reference = log_now.clone();
    let mut prev = lin.clone();
    let mut events = Vec::new();

    let mut t = step;
    while t < config.duration {
        render_into(config, t, &mut lin);
        for i in 0..w * h {
            if lin[i] != prev[i] {
                log_now[i] = lin[i].ln();
                prev[i] = lin[i];
            }
            let diff = log_now[i] - reference[i];
            if diff.abs() >= c {
                let n = (diff.abs() / c).floor();
                let p = if diff > 0.0 {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                reference[i] += diff.signum() * n * c;
                let (x, y) = ((i % w) as u16, (i / w) as u16);
                for _ in 0..n as usize {
                    events.push(Event { x, y, t, p });
                }
            }
        }
        t += step;
    }

    if config.noise_rate > 0.0 {
        let mut rng = seed::stream(config.seed, seed::NOISE);
        let mean = config.noise_rate * (w * h) as f64 * config.duration as f64 * 1e-6;
        let count = Poisson::new(mean)
            .map_err(|e| Error::arg(format!("noise rate: {e}")))?
            .sample(&mut rng) as usize;
        for _ in 0..count {
            events.push(Event {
                x: rng.random_range(0..config.sensor_w),
                y: rng.random_range(0..config.sensor_h),
                t: rng.random_range(0..config.duration),
                p: if rng.random_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                },
            });
        }
    }

    let events = EventStream::from_unsorted(config.sensor_w, config.sensor_h, events)?;
    let period = config.frame_period();
    let frames = (0..)
        .map(|k| k * period)
        .take_while(|&ft| ft <= config.duration)
        .map(|ft| {
            let mut img = vec![0.0; w * h];
            render_into(config, ft, &mut img);
            Frame {
                t: ft,
                image: GrayImage {
                    width: w,
                    height: h,
                    pixels: img,
                },
            }
        })
        .collect();
    Ok(SceneSequence {
        config: config.clone(),
        events,
        frames,
    })
}

/// Linearly interpolate boxes matched by track id.
///
/// Tracks present in only one of the lists are dropped.
pub fn interpolate_labels(
    boxes_a: &[GroundTruthBox],
    boxes_b: &[GroundTruthBox],
    fraction: f64,
) -> Vec<GroundTruthBox> {
    let by_id: HashMap<u64, &GroundTruthBox> = boxes_b.iter().map(|b| (b.track_id, b)).collect();
    boxes_a
        .iter()
        .filter_map(|a| {
            by_id.get(&a.track_id).map(|b| GroundTruthBox {
                bbox: a.bbox.lerp(&b.bbox, fraction),
                class_id: a.class_id,
                track_id: a.track_id,
            })
        })
        .collect()
}
