//! Experiment stages shared by the command line and the test suites.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::detector::{DetectMode, FitOptions, ToyModel};
use crate::error::Result;
use crate::eval::{frequency_sweep, EvalOptions, FrequencySweep, GtMode, SweepPoints};
use crate::event::FrequencyPlan;
use crate::seed;
use crate::synth::{generate_scene, SceneConfig, SceneSequence};
use crate::tune::{pretrain, self_train, RoundStats, TuneConfig, WindowLabels};

/// Render scenes in parallel, keeping input order.
pub fn generate_all(configs: &[SceneConfig]) -> Result<Vec<SceneSequence>> {
    configs.par_iter().map(generate_scene).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean loss per epoch on full labeled windows.
    pub base: Vec<f64>,
    /// Mean loss per epoch on the last high-frequency sub-window.
    pub sparse: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,epoch,loss\n");
        for (phase, v) in [("base", &self.base), ("sparse", &self.sparse)] {
            for (i, l) in v.iter().enumerate() {
                let _ = writeln!(out, "{phase},{i},{l:.6}");
            }
        }
        out
    }
}

/// Fresh model trained on full labeled windows, then on the sparse
/// high-frequency targets.
pub fn train_model(cfg: &ExperimentConfig, scenes: &[SceneSequence]) -> Result<(ToyModel, TrainLog)> {
    let mut model = ToyModel::init(cfg.model.clone(), &mut seed::stream(cfg.seed, seed::INIT))?;
    let mut rng = seed::stream(cfg.seed, seed::TRAINING);
    let t = &cfg.training;
    let opts = |epochs| FitOptions {
        epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        mode: t.mode,
    };
    let base_plan = FrequencyPlan::new(cfg.plan.base_hz, cfg.plan.base_hz)?;
    let base = pretrain(&mut model, scenes, base_plan, opts(t.base_epochs), &mut rng)?;
    let sparse = pretrain(&mut model, scenes, cfg.plan, opts(t.sparse_epochs), &mut rng)?;
    Ok((model, TrainLog { base, sparse }))
}

pub type RoundLabels = Vec<Vec<WindowLabels>>;

/// Self-training rounds on `scenes`, drawing from their own stream.
pub fn flextune_model(
    cfg: &ExperimentConfig,
    tune: &TuneConfig,
    model: &mut ToyModel,
    scenes: &[SceneSequence],
) -> Result<(Vec<RoundLabels>, Vec<RoundStats>)> {
    let mut rng = seed::indexed_stream(cfg.seed, seed::TRAINING, 1);
    self_train(model, scenes, cfg.plan, tune, cfg.training.lr, cfg.training.batch_size, &mut rng)
}

pub fn eval_model(
    cfg: &ExperimentConfig,
    model: &ToyModel,
    scenes: &[SceneSequence],
    points: &SweepPoints,
    gt_mode: GtMode,
    mode: DetectMode,
) -> Result<FrequencySweep> {
    let opts = EvalOptions {
        mode,
        gt_mode,
        nms_iou: cfg.eval.nms_iou,
    };
    frequency_sweep(model, scenes, points, &opts)
}
