//! High-frequency pseudo-labelling and cyclic self-training.

pub mod calibrate;
pub mod dump;

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use calibrate::{
    bidirectional_merge, calibrate, confidence_filter, link_tracklets, nms, prune_and_emit, CalibrationStats,
    PseudoLabelSet, Tracklet,
};
pub use dump::{pseudo_label_records, records_from_jsonl, records_to_jsonl, rounds_csv, PseudoLabelRecord};

use crate::boxes::{Detection, GroundTruthBox};
use crate::detector::{detect_slots, fit, DetectMode, FitOptions, LossBreakdown, ModelConfig, ToyModel, TrainSample};
use crate::error::{Error, Result};
use crate::event::{reverse_stream, slice_frequencies, voxelize, EventStream, EventTensor, FrequencyPlan, Micros, VoxelSpec, Window};
use crate::io::GrayImage;
use crate::synth::SceneSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    /// Confidence threshold for class 0.
    pub tau_car: f64,
    /// Confidence threshold for every other class.
    pub tau_ped: f64,
    /// IoU needed to extend a tracklet.
    pub tau_iou: f64,
    pub min_track_len: usize,
    pub pseudo_weight: f64,
    pub nms_iou: f64,
    pub rounds: usize,
    /// Windows a tracklet may miss and still be extended.
    pub max_gap: usize,
    pub epochs_per_round: usize,
    /// Detector mode for both pseudo-labelling and training.
    pub mode: DetectMode,
    pub reverse_flips_polarity: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            tau_car: 0.6,
            tau_ped: 0.6,
            tau_iou: 0.6,
            min_track_len: 6,
            pseudo_weight: 1.0,
            nms_iou: 0.5,
            rounds: 1,
            max_gap: 0,
            epochs_per_round: 1,
            mode: DetectMode::Fused,
            reverse_flips_polarity: true,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_car", self.tau_car),
            ("tau_ped", self.tau_ped),
            ("tau_iou", self.tau_iou),
            ("nms_iou", self.nms_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::arg(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if self.min_track_len == 0 {
            return Err(Error::arg("min_track_len must be >= 1"));
        }
        if !(self.pseudo_weight >= 0.0) || !self.pseudo_weight.is_finite() {
            return Err(Error::arg("pseudo_weight must be >= 0"));
        }
        if self.rounds == 0 || self.epochs_per_round == 0 {
            return Err(Error::arg("rounds and epochs_per_round must be >= 1"));
        }
        Ok(())
    }

    pub fn threshold_for(&self, class_id: u32) -> f64 {
        if class_id == 0 {
            self.tau_car
        } else {
            self.tau_ped
        }
    }
}

/// `sum(gt) + pseudo_weight * sum(pseudo)` over loss totals.
pub fn tune_loss(gt: &[LossBreakdown], pseudo: &[LossBreakdown], pseudo_weight: f64) -> f64 {
    let g: f64 = gt.iter().map(|l| l.total).sum();
    let p: f64 = pseudo.iter().map(|l| l.total).sum();
    if pseudo_weight == 0.0 {
        g
    } else {
        g + pseudo_weight * p
    }
}

fn voxel_spec(cfg: &ModelConfig) -> Result<VoxelSpec> {
    VoxelSpec::new(cfg.time_bins, cfg.height, cfg.width)
}

/// Model inputs for one sub-window: the sub-window alone, or the whole
/// labeled window followed by the sub-window for two-slot models.
fn slot_tensors(cfg: &ModelConfig, stream: &EventStream, labeled: Window, sub: Window) -> Result<Vec<EventTensor>> {
    let spec = voxel_spec(cfg)?;
    let mut out = Vec::with_capacity(2);
    if cfg.frequency_slots == 2 {
        out.push(voxelize(stream, labeled, spec)?);
    }
    out.push(voxelize(stream, sub, spec)?);
    Ok(out)
}

/// Detect on every sub-window of `labeled`, pairing sub-window `i` with `frames[i]`.
pub fn bootstrap(
    model: &ToyModel,
    stream: &EventStream,
    labeled: Window,
    windows: &[Window],
    frames: &[&GrayImage],
    mode: DetectMode,
) -> Result<Vec<Vec<Detection>>> {
    if frames.len() != windows.len() {
        return Err(Error::arg("bootstrap needs one frame per window"));
    }
    windows
        .iter()
        .zip(frames)
        .map(|(&w, f)| {
            let t = slot_tensors(&model.config, stream, labeled, w)?;
            let refs: Vec<&EventTensor> = t.iter().collect();
            detect_slots(model, &refs, f, mode)
        })
        .collect()
}

fn frame_before(scene: &SceneSequence, t: Micros) -> Result<&GrayImage> {
    scene
        .frame_at_or_before(t)
        .map(|f| &f.image)
        .ok_or_else(|| Error::arg(format!("no frame at or before t = {t}")))
}

/// Frames shared across samples, paired with the window that ends at or
/// after them: the frame at the detection instant or the latest before it.
struct FrameCache(Vec<Arc<GrayImage>>);

impl FrameCache {
    fn new(scene: &SceneSequence) -> Self {
        FrameCache(scene.frames.iter().map(|f| Arc::new(f.image.clone())).collect())
    }

    fn for_window(&self, scene: &SceneSequence, w: Window) -> Result<Arc<GrayImage>> {
        scene
            .frame_index_at_or_before(w.t2)
            .map(|i| self.0[i].clone())
            .ok_or_else(|| Error::arg(format!("no frame at or before t = {}", w.t2)))
    }
}

fn frame_at(scene: &SceneSequence, t: Micros) -> Result<&GrayImage> {
    scene
        .frames
        .iter()
        .find(|f| f.t == t)
        .map(|f| &f.image)
        .ok_or_else(|| Error::arg(format!("no frame at t = {t}")))
}

/// Pseudo-labels of one labeled window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLabels {
    pub labeled: Window,
    pub windows: Vec<Window>,
    pub labels: PseudoLabelSet,
    pub stats: CalibrationStats,
}

/// Forward and time-reversed passes plus calibration for one labeled window.
///
/// The backward pass pairs every reversed sub-window with the frame that
/// closes the labeled window.
pub fn label_window(
    model: &ToyModel,
    scene: &SceneSequence,
    labeled: Window,
    plan: FrequencyPlan,
    config: &TuneConfig,
) -> Result<WindowLabels> {
    let windows = slice_frequencies(labeled, plan)?;
    let fwd_frames: Vec<&GrayImage> = windows
        .iter()
        .map(|w| frame_before(scene, w.t1))
        .collect::<Result<_>>()?;
    let forward = bootstrap(model, &scene.events, labeled, &windows, &fwd_frames, config.mode)?;
    let reversed = reverse_stream(&scene.events, labeled, config.reverse_flips_polarity)?;
    let closing = frame_at(scene, labeled.t2)?;
    let backward = bootstrap(model, &reversed, labeled, &windows, &vec![closing; windows.len()], config.mode)?;
    let (labels, stats) = calibrate(&forward, &backward, &windows, config)?;
    Ok(WindowLabels {
        labeled,
        windows,
        labels,
        stats,
    })
}

/// Pseudo-labels for every labeled window of every scene.
pub fn generate_pseudo_labels(
    model: &ToyModel,
    scenes: &[SceneSequence],
    plan: FrequencyPlan,
    config: &TuneConfig,
) -> Result<Vec<Vec<WindowLabels>>> {
    scenes
        .iter()
        .map(|scene| {
            scene
                .labeled_windows()
                .par_iter()
                .map(|&w| label_window(model, scene, w, plan, config))
                .collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn sample(
    cfg: &ModelConfig,
    scene: &SceneSequence,
    frame: &Arc<GrayImage>,
    labeled: Window,
    sub: Window,
    gts: Vec<GroundTruthBox>,
    weight: f64,
    mode: DetectMode,
) -> Result<TrainSample> {
    Ok(TrainSample {
        events: slot_tensors(cfg, &scene.events, labeled, sub)?,
        frame: (mode == DetectMode::Fused).then(|| frame.clone()),
        gts,
        weight,
    })
}

/// Sparse supervision: the last sub-window of every labeled window with
/// the ground truth and the frame at its end.
pub fn sparse_samples(
    cfg: &ModelConfig,
    scenes: &[SceneSequence],
    plan: FrequencyPlan,
    mode: DetectMode,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for scene in scenes {
        let frames = FrameCache::new(scene);
        for labeled in scene.labeled_windows() {
            let subs = slice_frequencies(labeled, plan)?;
            let last = *subs.last().expect("plans yield at least one window");
            let frame = frames.for_window(scene, last)?;
            let gts = scene.gt_at(labeled.t2)?;
            out.push(sample(cfg, scene, &frame, labeled, last, gts, 1.0, mode)?);
        }
    }
    Ok(out)
}

/// Train on [`sparse_samples`].
pub fn pretrain<R: Rng>(
    model: &mut ToyModel,
    scenes: &[SceneSequence],
    plan: FrequencyPlan,
    opts: FitOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let samples = sparse_samples(&model.config, scenes, plan, opts.mode)?;
    fit(model, &samples, opts, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub calibration: CalibrationStats,
    /// Labels used for training (sub-windows before the last).
    pub pseudo_labels: usize,
    pub mean_score: Option<f64>,
    pub gt_samples: usize,
    pub pseudo_samples: usize,
    pub mean_loss: f64,
}

/// Training samples for one round: ground truth on every last sub-window
/// plus each earlier sub-window that received pseudo-labels.
pub fn tune_samples(
    cfg: &ModelConfig,
    scenes: &[SceneSequence],
    labels: &[Vec<WindowLabels>],
    config: &TuneConfig,
) -> Result<(Vec<TrainSample>, usize, usize)> {
    let mut out = Vec::new();
    let (mut n_gt, mut n_pseudo) = (0, 0);
    for (scene, per_window) in scenes.iter().zip(labels) {
        let frames = FrameCache::new(scene);
        for wl in per_window {
            let last = wl.windows.len() - 1;
            if config.pseudo_weight > 0.0 {
                for (i, l) in wl.labels.windows.iter().enumerate().take(last) {
                    if l.is_empty() {
                        continue;
                    }
                    out.push(sample(
                        cfg,
                        scene,
                        &frames.for_window(scene, wl.windows[i])?,
                        wl.labeled,
                        wl.windows[i],
                        l.clone(),
                        config.pseudo_weight,
                        config.mode,
                    )?);
                    n_pseudo += 1;
                }
            }
            let gts = scene.gt_at(wl.labeled.t2)?;
            let frame = frames.for_window(scene, wl.windows[last])?;
            out.push(sample(cfg, scene, &frame, wl.labeled, wl.windows[last], gts, 1.0, config.mode)?);
            n_gt += 1;
        }
    }
    Ok((out, n_gt, n_pseudo))
}

/// Alternate pseudo-label generation and training for `config.rounds` rounds.
pub fn self_train<R: Rng>(
    model: &mut ToyModel,
    scenes: &[SceneSequence],
    plan: FrequencyPlan,
    config: &TuneConfig,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<Vec<WindowLabels>>>, Vec<RoundStats>)> {
    config.validate()?;
    let mut history = Vec::with_capacity(config.rounds);
    let mut all_labels = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let labels = generate_pseudo_labels(model, scenes, plan, config)?;
        let mut calib = CalibrationStats::default();
        let mut used = 0usize;
        for wl in labels.iter().flatten() {
            calib.add(&wl.stats);
            let n = wl.windows.len();
            used += wl.labels.windows[..n - 1].iter().map(Vec::len).sum::<usize>();
        }
        let mean_score = calib.mean_score();
        if used == 0 {
            log::warn!("round {round}: no pseudo-labels survived calibration; training on ground truth only");
        }
        let (samples, gt_samples, pseudo_samples) = tune_samples(&model.config, scenes, &labels, config)?;
        let opts = FitOptions {
            epochs: config.epochs_per_round,
            batch_size,
            lr,
            mode: config.mode,
        };
        let losses = fit(model, &samples, opts, rng)?;
        let stats = RoundStats {
            round,
            calibration: calib,
            pseudo_labels: used,
            mean_score,
            gt_samples,
            pseudo_samples,
            mean_loss: losses.last().copied().unwrap_or(0.0),
        };
        log::info!(
            "round {round}: {} pseudo-labels (mean score {}), {} gt + {} pseudo samples, loss {:.4}",
            stats.pseudo_labels,
            mean_score.map_or("n/a".to_string(), |s| format!("{s:.3}")),
            gt_samples,
            pseudo_samples,
            stats.mean_loss
        );
        history.push(stats);
        all_labels.push(labels);
    }
    Ok((all_labels, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tune_loss_arithmetic() {
        let l = |t| LossBreakdown {
            total: t,
            ..Default::default()
        };
        assert_eq!(tune_loss(&[l(2.0)], &[l(1.0)], 0.5), 2.5);
        assert_eq!(tune_loss(&[l(2.0), l(1.5)], &[l(7.0)], 0.0), 3.5);
        assert_eq!(tune_loss(&[l(2.0)], &[], 3.0), 2.0);
        // zero weight never lets a non-finite pseudo term leak in
        assert_eq!(tune_loss(&[l(2.0)], &[l(f64::INFINITY)], 0.0), 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(TuneConfig::default().validate().is_ok());
        assert!(TuneConfig { tau_car: 0.0, ..Default::default() }.validate().is_err());
        assert!(TuneConfig { tau_iou: 1.5, ..Default::default() }.validate().is_err());
        assert!(TuneConfig { min_track_len: 0, ..Default::default() }.validate().is_err());
        assert!(TuneConfig { rounds: 0, ..Default::default() }.validate().is_err());
        assert!(TuneConfig { pseudo_weight: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(TuneConfig::default().threshold_for(5), 0.6);
    }
}
