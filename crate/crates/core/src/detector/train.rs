use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use super::loss::{detection_loss, LossBreakdown};
use super::model::{DetectMode, ToyModel};
use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};
use crate::event::EventTensor;
use crate::io::GrayImage;
use crate::seed;

/// Gradients with a larger global L2 norm are rescaled to this norm.
pub const GRAD_CLIP: f64 = 10.0;

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// One tensor per frequency slot of the model.
    pub events: Vec<EventTensor>,
    pub frame: Option<Arc<GrayImage>>,
    pub gts: Vec<GroundTruthBox>,
    /// Multiplies the detection loss (pseudo-labelled samples use < 1).
    pub weight: f64,
}

/// Loss and parameter gradient of one sample.
pub fn sample_gradient<R: Rng>(
    model: &ToyModel,
    sample: &TrainSample,
    mode: DetectMode,
    rng: &mut R,
) -> Result<(LossBreakdown, ToyModel)> {
    let slots: Vec<&EventTensor> = sample.events.iter().collect();
    let cache = model.forward(&slots, sample.frame.as_deref(), mode, true, rng)?;
    let (det, mut d_head) = detection_loss(&cache.head, &sample.gts);
    if sample.weight != 1.0 {
        d_head.data.iter_mut().for_each(|g| *g *= sample.weight);
    }
    let loss = det.scaled(sample.weight).with_fuse_reg(cache.fuse_reg);
    let grads = model.backward(&cache, &d_head)?;
    Ok((loss, grads))
}

/// One plain SGD step on the mean loss of `batch`.
///
/// Per-sample noise streams are drawn from `rng` in batch order, so the
/// result does not depend on thread scheduling. Returns the mean loss.
pub fn train_step<R: Rng>(
    model: &mut ToyModel,
    batch: &[&TrainSample],
    lr: f64,
    mode: DetectMode,
    rng: &mut R,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::arg("empty training batch"));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::arg(format!("learning rate must be >= 0, got {lr}")));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
    let results: Vec<Result<(LossBreakdown, ToyModel)>> = batch
        .par_iter()
        .zip(seeds)
        .map(|(s, sd)| sample_gradient(model, s, mode, &mut seed::Rng::seed_from_u64(sd)))
        .collect();

    let n = batch.len() as f64;
    let mut total = LossBreakdown::default();
    let mut grad = vec![0.0; model.num_params()];
    for r in results {
        let (loss, g) = r?;
        total = total.add(loss);
        for (acc, v) in grad.iter_mut().zip(g.flat_params()) {
            *acc += v;
        }
    }
    let total = total.scaled(1.0 / n);
    if !total.is_finite() {
        return Err(Error::Training(format!("non-finite loss {:?}", total)));
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt() / n;
    if !norm.is_finite() {
        return Err(Error::Training("non-finite gradient".into()));
    }
    let step = lr / n * if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
    let mut flat = model.flat_params();
    for (p, g) in flat.iter_mut().zip(&grad) {
        *p -= step * g;
    }
    model.set_flat_params(&flat)?;
    for gate in &mut model.gates {
        gate.sigma = gate.sigma.max(0.0);
    }
    if !model.is_finite() {
        return Err(Error::Training("parameters became non-finite".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: DetectMode,
}

/// Shuffled mini-batch SGD over `samples`; returns the mean loss per epoch.
pub fn fit<R: Rng>(model: &mut ToyModel, samples: &[TrainSample], opts: FitOptions, rng: &mut R) -> Result<Vec<f64>> {
    if opts.batch_size == 0 {
        return Err(Error::arg("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            sum += train_step(model, &batch, opts.lr, opts.mode, rng)?.total;
            batches += 1;
        }
        let mean = if batches == 0 { 0.0 } else { sum / batches as f64 };
        log::debug!("epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok(history)
}
