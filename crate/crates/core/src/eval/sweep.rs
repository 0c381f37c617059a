use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coco::{coco_map, EvalBundle, EvalImage};
use crate::detector::{detect, DetectMode, ToyModel};
use crate::error::{Error, Result};
use crate::event::{voxelize, Micros, VoxelSpec, Window};
use crate::synth::{interpolate_labels, SceneSequence};
use crate::tune::nms;

/// Where ground truth comes from at off-frame instants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtMode {
    /// Query the scene at the evaluation instant.
    Exact,
    /// Linear interpolation of the two surrounding frame annotations.
    Interpolated,
}

/// Evaluation points of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPoints {
    /// Offsets `i/n` of the frame interval, `i = 0..=n`.
    Offsets { n: usize },
    /// Windows of length `1e6 / f` ending at annotated frame times.
    Frequencies(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: DetectMode,
    pub gt_mode: GtMode,
    /// Classwise NMS applied to raw detections before scoring.
    pub nms_iou: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: DetectMode::Fused,
            gt_mode: GtMode::Exact,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub frequency_hz: f64,
    pub offset: Option<f64>,
    pub window_us: Micros,
    pub images: usize,
    pub bundle: EvalBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySweep {
    pub delta_t: Micros,
    pub gt_mode: GtMode,
    /// How effective frequencies were assigned to evaluation points.
    pub convention: String,
    pub results: Vec<SweepResult>,
}

pub const OFFSET_CONVENTION: &str = "offset i/n: window [t_k + i*dT/n - L, t_k + i*dT/n) with L = max(n - i, 1)*dT/n; \
frequency = n / (max(n - i, 1) * dT); frame = latest at or before the window end";
pub const FREQUENCY_CONVENTION: &str = "frequency f: window [t_k - L, t_k) with L = round(1e6 / f) us ending at annotated \
frame times; frame = latest at or before the window end";

/// One evaluation instant: window, frame index and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub window: Window,
    pub frame: usize,
    pub gts: Vec<crate::boxes::GroundTruthBox>,
}

fn check_scene(model: &ToyModel, scene: &SceneSequence) -> Result<Micros> {
    let c = &model.config;
    if usize::from(scene.config.sensor_w) != c.width || usize::from(scene.config.sensor_h) != c.height {
        return Err(Error::arg(format!(
            "scene sensor {}x{} does not match model {}x{}",
            scene.config.sensor_w, scene.config.sensor_h, c.width, c.height
        )));
    }
    Ok(scene.config.frame_period())
}

/// Evaluation points of `scene` at offset `i/n` of every frame interval
/// that has a full interval before it.
pub fn offset_points(scene: &SceneSequence, i: usize, n: usize, gt_mode: GtMode) -> Result<Vec<EvalPoint>> {
    if n == 0 || i > n {
        return Err(Error::arg(format!("offset {i}/{n} outside [0, 1]")));
    }
    let dt = scene.config.frame_period();
    let (i_, n_) = (i as Micros, n as Micros);
    let len = (n_ - i_).max(1) * dt / n_;
    let mut out = Vec::new();
    for k in 1..scene.frames.len().saturating_sub(1) {
        let tk = scene.frames[k].t;
        let t_eval = tk + i_ * dt / n_;
        let window = Window::new(t_eval - len, t_eval)?;
        let gts = match gt_mode {
            GtMode::Exact => scene.gt_at(t_eval)?,
            GtMode::Interpolated => {
                let a = scene.gt_at(tk)?;
                let b = scene.gt_at(scene.frames[k + 1].t)?;
                interpolate_labels(&a, &b, i as f64 / n as f64)
            }
        };
        let frame = scene
            .frame_index_at_or_before(window.t2)
            .ok_or_else(|| Error::arg("window ends before the first frame"))?;
        out.push(EvalPoint { window, frame, gts });
    }
    Ok(out)
}

/// Evaluation points with windows of `window_us` ending at frame times.
pub fn frequency_points(scene: &SceneSequence, window_us: Micros) -> Result<Vec<EvalPoint>> {
    if window_us <= 0 {
        return Err(Error::arg("window length must be positive"));
    }
    let mut out = Vec::new();
    for f in &scene.frames {
        if f.t - window_us < 0 {
            continue;
        }
        let window = Window::new(f.t - window_us, f.t)?;
        let frame = scene
            .frame_index_at_or_before(window.t2)
            .ok_or_else(|| Error::arg("window ends before the first frame"))?;
        out.push(EvalPoint {
            window,
            frame,
            gts: scene.gt_at(f.t)?,
        });
    }
    Ok(out)
}

/// Run the detector on every point and collect COCO inputs.
pub fn evaluate_points(model: &ToyModel, scene: &SceneSequence, points: &[EvalPoint], opts: &EvalOptions) -> Result<Vec<EvalImage>> {
    let spec = VoxelSpec::new(model.config.time_bins, model.config.height, model.config.width)?;
    points
        .par_iter()
        .map(|p| {
            let t = voxelize(&scene.events, p.window, spec)?;
            let raw = detect(model, &t, &scene.frames[p.frame].image, opts.mode)?;
            Ok(EvalImage {
                detections: nms(&raw, opts.nms_iou),
                gts: p.gts.clone(),
            })
        })
        .collect()
}

/// Evaluate `model` over `scenes` at every sweep point; images from all
/// scenes are pooled per point.
pub fn frequency_sweep(model: &ToyModel, scenes: &[SceneSequence], points: &SweepPoints, opts: &EvalOptions) -> Result<FrequencySweep> {
    if scenes.is_empty() {
        return Err(Error::arg("frequency sweep needs at least one scene"));
    }
    let dt = check_scene(model, &scenes[0])?;
    for s in scenes {
        if check_scene(model, s)? != dt {
            return Err(Error::arg("scenes with different frame rates cannot be pooled"));
        }
    }
    let mut results = Vec::new();
    let convention = match points {
        SweepPoints::Offsets { n } => {
            if *n == 0 {
                return Err(Error::arg("offset count n must be positive"));
            }
            for i in 0..=*n {
                let len = (*n - i).max(1) as Micros * dt / *n as Micros;
                let mut images = Vec::new();
                for s in scenes {
                    let pts = offset_points(s, i, *n, opts.gt_mode)?;
                    images.extend(evaluate_points(model, s, &pts, opts)?);
                }
                results.push(SweepResult {
                    frequency_hz: *n as f64 / ((*n - i).max(1) as f64 * dt as f64 * 1e-6),
                    offset: Some(i as f64 / *n as f64),
                    window_us: len,
                    images: images.len(),
                    bundle: coco_map(&images)?,
                });
            }
            OFFSET_CONVENTION
        }
        SweepPoints::Frequencies(freqs) => {
            for &f in freqs {
                if !(f > 0.0) || !f.is_finite() {
                    return Err(Error::arg(format!("frequency {f} must be positive")));
                }
                let len = (1e6 / f).round() as Micros;
                let mut images = Vec::new();
                for s in scenes {
                    let pts = frequency_points(s, len)?;
                    images.extend(evaluate_points(model, s, &pts, opts)?);
                }
                results.push(SweepResult {
                    frequency_hz: f,
                    offset: None,
                    window_us: len,
                    images: images.len(),
                    bundle: coco_map(&images)?,
                });
            }
            FREQUENCY_CONVENTION
        }
    };
    Ok(FrequencySweep {
        delta_t: dt,
        gt_mode: opts.gt_mode,
        convention: convention.to_string(),
        results,
    })
}
