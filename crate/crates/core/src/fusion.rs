//! Adaptive event/frame fusion with a noisy softmax gate.
//!
//! At each spatial location the concatenated features `[h_e, h_f]` are
//! projected by `W` to two logits, optionally perturbed by `sigma * eps`,
//! and softmaxed into `(alpha, beta)`. The fused map is
//! `alpha * h_e + beta * h_f`; fused maps from different event frequencies
//! are summed. A squared-coefficient-of-variation penalty on the pooled gate
//! weights discourages collapsing onto one branch.
//!
//! Everything here has a hand-written backward pass.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `(C, H, W)` activations at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub scale_index: usize,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, scale_index: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            scale_index,
        }
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        scale_index: usize,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::arg(format!(
                "feature data has {} values, shape ({channels}, {height}, {width}) needs {}",
                data.len(),
                channels * height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
            scale_index,
        })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    fn check_same_shape(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::arg(format!(
                "{what}: shape ({}, {}, {}) vs ({}, {}, {})",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Channel-wise concatenation `[h_e, h_f]`.
pub fn concat_features(h_e: &FeatureMap, h_f: &FeatureMap) -> Result<FeatureMap> {
    if h_e.height != h_f.height || h_e.width != h_f.width {
        return Err(Error::arg(format!(
            "cannot concatenate {}x{} with {}x{} feature maps",
            h_e.height, h_e.width, h_f.height, h_f.width
        )));
    }
    let mut data = Vec::with_capacity(h_e.data.len() + h_f.data.len());
    data.extend_from_slice(&h_e.data);
    data.extend_from_slice(&h_f.data);
    Ok(FeatureMap {
        channels: h_e.channels + h_f.channels,
        height: h_e.height,
        width: h_e.width,
        data,
        scale_index: h_e.scale_index,
    })
}

/// Inverse of [`concat_features`]: the first `channels` channels and the rest.
pub fn split_features(h: &FeatureMap, channels: usize) -> Result<(FeatureMap, FeatureMap)> {
    if channels > h.channels {
        return Err(Error::arg(format!(
            "split at {channels} exceeds {} channels",
            h.channels
        )));
    }
    let cut = channels * h.plane();
    let mk = |c, d: &[f64]| FeatureMap {
        channels: c,
        height: h.height,
        width: h.width,
        data: d.to_vec(),
        scale_index: h.scale_index,
    };
    Ok((
        mk(channels, &h.data[..cut]),
        mk(h.channels - channels, &h.data[cut..]),
    ))
}

/// Per-scale gate parameters: `W` is `(rows, 2)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub rows: usize,
    pub w: Vec<f64>,
    pub sigma: f64,
    pub lambda_reg: f64,
}

pub const DEFAULT_LAMBDA: f64 = 0.01;

impl GateParams {
    pub fn zeros(rows: usize) -> Self {
        GateParams {
            rows,
            w: vec![0.0; rows * 2],
            sigma: 0.0,
            lambda_reg: DEFAULT_LAMBDA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() != self.rows * 2 {
            return Err(Error::arg(format!(
                "gate matrix has {} values, expected {}x2",
                self.w.len(),
                self.rows
            )));
        }
        if self.w.iter().any(|v| !v.is_finite()) || !self.sigma.is_finite() {
            return Err(Error::arg("gate parameters must be finite"));
        }
        if self.sigma < 0.0 {
            return Err(Error::arg("gate sigma must be >= 0"));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::arg("lambda_reg must be >= 0"));
        }
        Ok(())
    }
}

/// Soft weights for the event (`alpha`) and frame (`beta`) branches, `(H, W)` each.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub height: usize,
    pub width: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GateWeights {
    pub fn constant(height: usize, width: usize, alpha: f64) -> Self {
        GateWeights {
            height,
            width,
            alpha: vec![alpha; height * width],
            beta: vec![1.0 - alpha; height * width],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Independent draw per location and logit.
    #[default]
    PerLogit,
    /// One draw per logit shared by the whole map.
    PerMap,
}

/// Values recorded by [`gate_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GateCache {
    pub h_shared: FeatureMap,
    /// Standard-normal draws per location (all zero in eval mode).
    pub eps: Vec<[f64; 2]>,
    pub weights: GateWeights,
}

fn softmax2(z0: f64, z1: f64) -> (f64, f64) {
    // (1 + e^{z1 - z0})^{-1}, written to stay finite for large gaps
    let d = z1 - z0;
    let e = (-d.abs()).exp();
    let (big, small) = (1.0 / (1.0 + e), e / (1.0 + e));
    if d >= 0.0 {
        (small, big)
    } else {
        (big, small)
    }
}

/// Gate forward pass keeping the values needed for gradients.
pub fn gate_forward<R: Rng>(
    h_shared: &FeatureMap,
    params: &GateParams,
    training: bool,
    noise: NoiseMode,
    rng: &mut R,
) -> Result<GateCache> {
    if h_shared.channels != params.rows {
        return Err(Error::arg(format!(
            "shared features have {} channels, gate expects {}",
            h_shared.channels, params.rows
        )));
    }
    let n = h_shared.plane();
    let mut z = vec![[0.0f64; 2]; n];
    for c in 0..params.rows {
        let (w0, w1) = (params.w[2 * c], params.w[2 * c + 1]);
        for (zp, &h) in z.iter_mut().zip(h_shared.channel(c)) {
            zp[0] += h * w0;
            zp[1] += h * w1;
        }
    }
    let eps: Vec<[f64; 2]> = if training {
        match noise {
            NoiseMode::PerLogit => (0..n)
                .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
                .collect(),
            NoiseMode::PerMap => {
                let e = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                vec![e; n]
            }
        }
    } else {
        vec![[0.0; 2]; n]
    };
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    for (zp, e) in z.iter().zip(&eps) {
        let (a, b) = softmax2(zp[0] + params.sigma * e[0], zp[1] + params.sigma * e[1]);
        alpha.push(a);
        beta.push(b);
    }
    Ok(GateCache {
        h_shared: h_shared.clone(),
        eps,
        weights: GateWeights {
            height: h_shared.height,
            width: h_shared.width,
            alpha,
            beta,
        },
    })
}

/// Compute `(alpha, beta)`; noise is only injected when `training` is set.
pub fn gate_weights<R: Rng>(
    h_shared: &FeatureMap,
    params: &GateParams,
    training: bool,
    rng: &mut R,
) -> Result<GateWeights> {
    gate_forward(h_shared, params, training, NoiseMode::PerLogit, rng).map(|c| c.weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub d_w: Vec<f64>,
    pub d_sigma: f64,
    pub d_h_shared: FeatureMap,
}

/// Backpropagate upstream gradients on `(alpha, beta)` through the gate.
pub fn gate_backward(cache: &GateCache, params: &GateParams, d_alpha: &[f64], d_beta: &[f64]) -> GateGrads {
    let n = cache.h_shared.plane();
    let wts = &cache.weights;
    let mut dz = vec![[0.0f64; 2]; n];
    let mut d_sigma = 0.0;
    for p in 0..n {
        let (a, b) = (wts.alpha[p], wts.beta[p]);
        let dot = a * d_alpha[p] + b * d_beta[p];
        let g0 = a * (d_alpha[p] - dot);
        let g1 = b * (d_beta[p] - dot);
        dz[p] = [g0, g1];
        d_sigma += g0 * cache.eps[p][0] + g1 * cache.eps[p][1];
    }
    let mut d_w = vec![0.0; params.rows * 2];
    let mut d_h = FeatureMap::zeros(params.rows, cache.h_shared.height, cache.h_shared.width, cache.h_shared.scale_index);
    for c in 0..params.rows {
        let (w0, w1) = (params.w[2 * c], params.w[2 * c + 1]);
        let h = cache.h_shared.channel(c);
        let dh = &mut d_h.data[c * n..(c + 1) * n];
        let (mut s0, mut s1) = (0.0, 0.0);
        for p in 0..n {
            s0 += h[p] * dz[p][0];
            s1 += h[p] * dz[p][1];
            dh[p] = w0 * dz[p][0] + w1 * dz[p][1];
        }
        d_w[2 * c] = s0;
        d_w[2 * c + 1] = s1;
    }
    GateGrads {
        d_w,
        d_sigma,
        d_h_shared: d_h,
    }
}

/// `alpha * h_e + beta * h_f`, with the weights broadcast over channels.
pub fn fuse(h_e: &FeatureMap, h_f: &FeatureMap, weights: &GateWeights) -> Result<FeatureMap> {
    h_e.check_same_shape(h_f, "fuse")?;
    if weights.height != h_e.height || weights.width != h_e.width {
        return Err(Error::arg(format!(
            "gate weights are {}x{}, features are {}x{}",
            weights.height, weights.width, h_e.height, h_e.width
        )));
    }
    let n = h_e.plane();
    let mut out = FeatureMap::zeros(h_e.channels, h_e.height, h_e.width, h_e.scale_index);
    for c in 0..h_e.channels {
        let (e, f) = (h_e.channel(c), h_f.channel(c));
        let o = &mut out.data[c * n..(c + 1) * n];
        for p in 0..n {
            o[p] = weights.alpha[p] * e[p] + weights.beta[p] * f[p];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseGrads {
    pub d_h_e: FeatureMap,
    pub d_h_f: FeatureMap,
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
}

pub fn fuse_backward(h_e: &FeatureMap, h_f: &FeatureMap, weights: &GateWeights, d_out: &FeatureMap) -> FuseGrads {
    let n = h_e.plane();
    let mut d_h_e = FeatureMap::zeros(h_e.channels, h_e.height, h_e.width, h_e.scale_index);
    let mut d_h_f = d_h_e.clone();
    let mut d_alpha = vec![0.0; n];
    let mut d_beta = vec![0.0; n];
    for c in 0..h_e.channels {
        let (e, f, g) = (h_e.channel(c), h_f.channel(c), d_out.channel(c));
        for p in 0..n {
            d_alpha[p] += g[p] * e[p];
            d_beta[p] += g[p] * f[p];
            d_h_e.data[c * n + p] = weights.alpha[p] * g[p];
            d_h_f.data[c * n + p] = weights.beta[p] * g[p];
        }
    }
    FuseGrads {
        d_h_e,
        d_h_f,
        d_alpha,
        d_beta,
    }
}

/// Element-wise sum of fused maps from two event frequencies.
pub fn combine_frequencies(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    a.check_same_shape(b, "combine_frequencies")?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Mean, population variance and count. Values are shifted by the first
/// one, so constant inputs give a variance of exactly zero.
fn pooled_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let shift = values.clone().next().unwrap_or(0.0);
    let n = values.clone().count();
    let d_mean = values.clone().map(|v| v - shift).sum::<f64>() / n as f64;
    let d_sq = values.map(|v| (v - shift) * (v - shift)).sum::<f64>() / n as f64;
    (shift + d_mean, (d_sq - d_mean * d_mean).max(0.0), n)
}

fn check_nonempty(weights: &[&GateWeights]) -> Result<()> {
    if weights.is_empty() || weights.iter().all(|w| w.alpha.is_empty()) {
        return Err(Error::arg("fusion regularizer needs at least one gate weight"));
    }
    Ok(())
}

/// `lambda * (Var(alpha) / E[alpha]^2 + Var(beta) / E[beta]^2)` over all
/// locations of all given scales pooled together (population variance).
pub fn fusion_regularizer(weights: &[&GateWeights], lambda: f64) -> Result<f64> {
    check_nonempty(weights)?;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let cv2 = |sel: fn(&GateWeights) -> &Vec<f64>| {
        let it = weights.iter().flat_map(move |w| sel(w).iter().copied());
        let (mean, var, _) = pooled_stats(it);
        var / (mean * mean)
    };
    Ok(lambda * (cv2(|w| &w.alpha) + cv2(|w| &w.beta)))
}

/// Gradient of [`fusion_regularizer`] w.r.t. every alpha and beta, per scale.
pub fn fusion_regularizer_grad(weights: &[&GateWeights], lambda: f64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    check_nonempty(weights)?;
    if lambda == 0.0 {
        return Ok(weights
            .iter()
            .map(|w| (vec![0.0; w.alpha.len()], vec![0.0; w.beta.len()]))
            .collect());
    }
    // d/dv_i of mean_sq/mean^2 - 1 = 2/(N mean^2) * (v_i - mean_sq/mean)
    let coeffs = |sel: fn(&GateWeights) -> &Vec<f64>| {
        let it = weights.iter().flat_map(move |w| sel(w).iter().copied());
        let (mean, var, n) = pooled_stats(it);
        (2.0 * lambda / (n as f64 * mean * mean), (var + mean * mean) / mean)
    };
    let (ka, ca) = coeffs(|w| &w.alpha);
    let (kb, cb) = coeffs(|w| &w.beta);
    Ok(weights
        .iter()
        .map(|w| {
            (
                w.alpha.iter().map(|&a| ka * (a - ca)).collect(),
                w.beta.iter().map(|&b| kb * (b - cb)).collect(),
            )
        })
        .collect())
}

/// One scale of fusion over any number of event-frequency slots.
///
/// `forward` records per-slot gate caches; `backward` fails with a state
/// error until a forward pass has run.
#[derive(Debug, Default, Clone)]
pub struct FusionBlock {
    slots: Option<Vec<SlotCache>>,
}

#[derive(Debug, Clone)]
struct SlotCache {
    h_e: FeatureMap,
    gate: GateCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub d_w: Vec<f64>,
    pub d_sigma: f64,
    pub d_h_e: Vec<FeatureMap>,
    /// Gradient w.r.t. the frame features entering the concatenation.
    pub d_h_f_shared: FeatureMap,
    /// Gradient w.r.t. the (channel-aligned) frame features entering `fuse`.
    pub d_h_f_fuse: FeatureMap,
}

impl FusionBlock {
    pub fn new() -> Self {
        FusionBlock { slots: None }
    }

    /// Fuse every slot with the frame features and sum the results.
    ///
    /// `h_f_shared` is concatenated for gating; `h_f_fuse` must have the
    /// event channel count and is what gets blended.
    pub fn forward<R: Rng>(
        &mut self,
        params: &GateParams,
        h_e: &[FeatureMap],
        h_f_shared: &FeatureMap,
        h_f_fuse: &FeatureMap,
        training: bool,
        noise: NoiseMode,
        rng: &mut R,
    ) -> Result<FeatureMap> {
        if h_e.is_empty() {
            return Err(Error::arg("fusion needs at least one event feature map"));
        }
        let mut out: Option<FeatureMap> = None;
        let mut slots = Vec::with_capacity(h_e.len());
        for he in h_e {
            let shared = concat_features(he, h_f_shared)?;
            let gate = gate_forward(&shared, params, training, noise, rng)?;
            let fused = fuse(he, h_f_fuse, &gate.weights)?;
            out = Some(match out {
                None => fused,
                Some(acc) => combine_frequencies(&acc, &fused)?,
            });
            slots.push(SlotCache {
                h_e: he.clone(),
                gate,
            });
        }
        self.slots = Some(slots);
        Ok(out.expect("at least one slot"))
    }

    pub fn weights(&self) -> Vec<&GateWeights> {
        self.slots
            .iter()
            .flatten()
            .map(|s| &s.gate.weights)
            .collect()
    }

    /// Backward pass. `reg_grads` holds extra `(d_alpha, d_beta)` per slot
    /// (from the regularizer), or is empty.
    pub fn backward(
        &self,
        params: &GateParams,
        h_f_fuse: &FeatureMap,
        d_out: &FeatureMap,
        reg_grads: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<BlockGrads> {
        let slots = self
            .slots
            .as_ref()
            .ok_or_else(|| Error::State("fusion backward called before forward".into()))?;
        if !reg_grads.is_empty() && reg_grads.len() != slots.len() {
            return Err(Error::arg("regularizer gradients do not match slot count"));
        }
        let c_e = slots[0].h_e.channels;
        let mut d_w = vec![0.0; params.rows * 2];
        let mut d_sigma = 0.0;
        let mut d_h_e = Vec::with_capacity(slots.len());
        let mut d_h_f_shared: Option<FeatureMap> = None;
        let mut d_h_f_fuse = FeatureMap::zeros(h_f_fuse.channels, h_f_fuse.height, h_f_fuse.width, h_f_fuse.scale_index);
        for (i, slot) in slots.iter().enumerate() {
            let fg = fuse_backward(&slot.h_e, h_f_fuse, &slot.gate.weights, d_out);
            let (mut da, mut db) = (fg.d_alpha, fg.d_beta);
            if let Some((ra, rb)) = reg_grads.get(i) {
                da.iter_mut().zip(ra).for_each(|(d, r)| *d += r);
                db.iter_mut().zip(rb).for_each(|(d, r)| *d += r);
            }
            let gg = gate_backward(&slot.gate, params, &da, &db);
            d_w.iter_mut().zip(&gg.d_w).for_each(|(a, b)| *a += b);
            d_sigma += gg.d_sigma;
            let (ds_e, ds_f) = split_features(&gg.d_h_shared, c_e)?;
            let mut de = fg.d_h_e;
            de.add_assign(&ds_e);
            d_h_e.push(de);
            match d_h_f_shared.as_mut() {
                None => d_h_f_shared = Some(ds_f),
                Some(acc) => acc.add_assign(&ds_f),
            }
            d_h_f_fuse.add_assign(&fg.d_h_f);
        }
        Ok(BlockGrads {
            d_w,
            d_sigma,
            d_h_e,
            d_h_f_shared: d_h_f_shared.expect("at least one slot"),
            d_h_f_fuse,
        })
    }
}
