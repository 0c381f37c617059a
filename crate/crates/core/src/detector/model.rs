use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::conv::{self, Conv2d};
use super::loss::{sigmoid, HeadOutput};
use crate::boxes::Detection;
use crate::error::{Error, Result};
use crate::event::EventTensor;
use crate::fusion::{self, FeatureMap, FusionBlock, GateParams, NoiseMode};
use crate::io::GrayImage;

/// Network shape and inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub time_bins: usize,
    /// Channels after the first and second strided stage.
    pub channels: [usize; 2],
    pub kernel: usize,
    pub num_classes: usize,
    /// Number of event tensors fused per prediction (1, or 2 for low+high frequency).
    pub frequency_slots: usize,
    pub lambda_reg: f64,
    pub noise_mode: NoiseMode,
    pub score_threshold: f64,
    /// Multiplier applied to raw event counts before the first convolution.
    pub event_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            height: 64,
            time_bins: 2,
            channels: [8, 16],
            kernel: 5,
            num_classes: 2,
            frequency_slots: 1,
            lambda_reg: fusion::DEFAULT_LAMBDA,
            noise_mode: NoiseMode::PerLogit,
            score_threshold: 0.01,
            event_scale: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(4) || !self.height.is_multiple_of(4) {
            return Err(Error::arg(format!(
                "model input {}x{} must be a positive multiple of 4",
                self.width, self.height
            )));
        }
        if self.time_bins == 0 || self.channels.contains(&0) || self.num_classes == 0 {
            return Err(Error::arg("time_bins, channels and num_classes must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::arg("kernel size must be odd"));
        }
        if !(1..=2).contains(&self.frequency_slots) {
            return Err(Error::arg("frequency_slots must be 1 or 2"));
        }
        if !(self.lambda_reg >= 0.0) || !(self.event_scale > 0.0) {
            return Err(Error::arg("lambda_reg must be >= 0 and event_scale > 0"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        4
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    fn head_outputs(&self) -> usize {
        HeadOutput::channels_for(self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMode {
    Fused,
    /// Gate bypassed with `alpha = 1`; the frame is never read.
    EventOnly,
}

/// Two-branch strided CNN with per-scale gated fusion and a 1x1 grid head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub ev1: Conv2d,
    pub ev2: Conv2d,
    pub fr1: Conv2d,
    pub fr2: Conv2d,
    /// Per-scale 1x1 maps from frame channels to event channels, `(c, c)`.
    pub proj: [Vec<f64>; 2],
    pub gates: [GateParams; 2],
    /// `(outputs, c1 + c2)`.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl ToyModel {
    /// All-zero parameters with the given shape.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.channels;
        let k = config.kernel;
        let mut gates = [GateParams::zeros(2 * c1), GateParams::zeros(2 * c2)];
        for g in &mut gates {
            g.lambda_reg = config.lambda_reg;
        }
        Ok(ToyModel {
            ev1: Conv2d::zeros(2 * config.time_bins, c1, k, 2),
            ev2: Conv2d::zeros(c1, c2, k, 2),
            fr1: Conv2d::zeros(1, c1, k, 2),
            fr2: Conv2d::zeros(c1, c2, k, 2),
            proj: [vec![0.0; c1 * c1], vec![0.0; c2 * c2]],
            gates,
            head_w: vec![0.0; config.head_outputs() * (c1 + c2)],
            head_b: vec![0.0; config.head_outputs()],
            config,
        })
    }

    /// Random initialization from `rng`.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let [c1, c2] = m.config.channels;
        let k = m.config.kernel;
        m.ev1 = Conv2d::init(2 * m.config.time_bins, c1, k, 2, rng);
        m.ev2 = Conv2d::init(c1, c2, k, 2, rng);
        m.fr1 = Conv2d::init(1, c1, k, 2, rng);
        m.fr2 = Conv2d::init(c1, c2, k, 2, rng);
        for (p, c) in m.proj.iter_mut().zip([c1, c2]) {
            for i in 0..c {
                p[i * c + i] = 1.0;
            }
        }
        for g in &mut m.gates {
            for w in &mut g.w {
                *w = 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
            g.sigma = 0.1;
        }
        for w in &mut m.head_w {
            *w = 0.01 * rng.sample::<f64, _>(StandardNormal);
        }
        // objectness prior of 1%
        m.head_b[0] = -(99.0f64).ln();
        Ok(m)
    }

    /// Named parameter slices in a fixed order (checkpoints and SGD rely on it).
    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("ev1.weight", &self.ev1.weight[..]),
            ("ev1.bias", &self.ev1.bias[..]),
            ("ev2.weight", &self.ev2.weight[..]),
            ("ev2.bias", &self.ev2.bias[..]),
            ("fr1.weight", &self.fr1.weight[..]),
            ("fr1.bias", &self.fr1.bias[..]),
            ("fr2.weight", &self.fr2.weight[..]),
            ("fr2.bias", &self.fr2.bias[..]),
            ("proj0", &self.proj[0][..]),
            ("proj1", &self.proj[1][..]),
            ("gate0.w", &self.gates[0].w[..]),
            ("gate0.sigma", std::slice::from_ref(&self.gates[0].sigma)),
            ("gate1.w", &self.gates[1].w[..]),
            ("gate1.sigma", std::slice::from_ref(&self.gates[1].sigma)),
            ("head.weight", &self.head_w[..]),
            ("head.bias", &self.head_b[..]),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let [g0, g1] = &mut self.gates;
        let [p0, p1] = &mut self.proj;
        vec![
            ("ev1.weight", &mut self.ev1.weight[..]),
            ("ev1.bias", &mut self.ev1.bias[..]),
            ("ev2.weight", &mut self.ev2.weight[..]),
            ("ev2.bias", &mut self.ev2.bias[..]),
            ("fr1.weight", &mut self.fr1.weight[..]),
            ("fr1.bias", &mut self.fr1.bias[..]),
            ("fr2.weight", &mut self.fr2.weight[..]),
            ("fr2.bias", &mut self.fr2.bias[..]),
            ("proj0", &mut p0[..]),
            ("proj1", &mut p1[..]),
            ("gate0.w", &mut g0.w[..]),
            ("gate0.sigma", std::slice::from_mut(&mut g0.sigma)),
            ("gate1.w", &mut g1.w[..]),
            ("gate1.sigma", std::slice::from_mut(&mut g1.sigma)),
            ("head.weight", &mut self.head_w[..]),
            ("head.bias", &mut self.head_b[..]),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|(_, p)| p.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::data(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, p) in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, events: &[&EventTensor], frame: Option<&GrayImage>) -> Result<()> {
        let c = &self.config;
        if events.len() != c.frequency_slots {
            return Err(Error::arg(format!(
                "model expects {} event tensor(s), got {}",
                c.frequency_slots,
                events.len()
            )));
        }
        for t in events {
            let s = t.spec();
            if s.bins != c.time_bins || s.height != c.height || s.width != c.width {
                return Err(Error::arg(format!(
                    "event tensor (T={}, {}x{}) does not match model (T={}, {}x{})",
                    s.bins, s.width, s.height, c.time_bins, c.width, c.height
                )));
            }
        }
        if let Some(f) = frame {
            if f.width != c.width || f.height != c.height {
                return Err(Error::arg(format!(
                    "frame {}x{} does not match model {}x{}",
                    f.width, f.height, c.width, c.height
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn event_input(t: &EventTensor, scale: f64) -> FeatureMap {
    let s = t.spec();
    FeatureMap {
        channels: 2 * s.bins,
        height: s.height,
        width: s.width,
        data: t.data().iter().map(|&c| f64::from(c) * scale).collect(),
        scale_index: 0,
    }
}

/// Log intensity with the frame mean removed.
pub(crate) fn frame_input(f: &GrayImage) -> FeatureMap {
    let logs: Vec<f64> = f.pixels.iter().map(|&v| v.max(1e-3).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    FeatureMap {
        channels: 1,
        height: f.height,
        width: f.width,
        data: logs.into_iter().map(|v| v - mean).collect(),
        scale_index: 0,
    }
}

#[derive(Debug, Clone)]
struct Branch {
    input: FeatureMap,
    pre1: FeatureMap,
    a1: FeatureMap,
    pre2: FeatureMap,
    a2: FeatureMap,
}

fn run_branch(c1: &Conv2d, c2: &Conv2d, input: FeatureMap) -> Branch {
    let pre1 = c1.forward(&input, 0);
    let a1 = conv::relu(&pre1);
    let pre2 = c2.forward(&a1, 1);
    let a2 = conv::relu(&pre2);
    Branch {
        input,
        pre1,
        a1,
        pre2,
        a2,
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: DetectMode,
    events: Vec<Branch>,
    frame: Option<Branch>,
    proj_f: [Option<FeatureMap>; 2],
    blocks: [FusionBlock; 2],
    fused: [FeatureMap; 2],
    head_in: FeatureMap,
    pub head: HeadOutput,
    pub fuse_reg: f64,
}

impl ForwardCache {
    /// Smallest |pre-activation| over all ReLUs.
    pub fn relu_margin(&self) -> f64 {
        self.events
            .iter()
            .chain(self.frame.iter())
            .flat_map(|b| b.pre1.data.iter().chain(&b.pre2.data))
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl ToyModel {
    /// Forward pass to head activations.
    ///
    /// In `training` mode the gates draw noise from `rng`.
    pub fn forward<R: Rng>(
        &self,
        events: &[&EventTensor],
        frame: Option<&GrayImage>,
        mode: DetectMode,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardCache> {
        self.check_inputs(events, frame)?;
        let cfg = &self.config;
        let [c1, c2] = cfg.channels;
        let ev: Vec<Branch> = events
            .iter()
            .map(|t| run_branch(&self.ev1, &self.ev2, event_input(t, cfg.event_scale)))
            .collect();

        let mut blocks = [FusionBlock::new(), FusionBlock::new()];
        let mut proj_f = [None, None];
        let mut fr = None;
        let mut fuse_reg = 0.0;
        let fused: [FeatureMap; 2] = match mode {
            DetectMode::EventOnly => {
                let sum = |pick: fn(&Branch) -> &FeatureMap| {
                    let mut acc = pick(&ev[0]).clone();
                    for b in &ev[1..] {
                        acc.add_assign(pick(b));
                    }
                    acc
                };
                [sum(|b| &b.a1), sum(|b| &b.a2)]
            }
            DetectMode::Fused => {
                let frame = frame.ok_or_else(|| Error::arg("fused mode requires a frame"))?;
                let f = run_branch(&self.fr1, &self.fr2, frame_input(frame));
                let mut out = Vec::with_capacity(2);
                for (s, (f_s, c)) in [(&f.a1, c1), (&f.a2, c2)].into_iter().enumerate() {
                    let pf = conv::pointwise(&self.proj[s], None, c, f_s);
                    let h_e: Vec<FeatureMap> = ev
                        .iter()
                        .map(|b| if s == 0 { b.a1.clone() } else { b.a2.clone() })
                        .collect();
                    out.push(blocks[s].forward(&self.gates[s], &h_e, f_s, &pf, training, cfg.noise_mode, rng)?);
                    proj_f[s] = Some(pf);
                }
                let all: Vec<&fusion::GateWeights> =
                    blocks.iter().flat_map(|b| b.weights()).collect();
                fuse_reg = fusion::fusion_regularizer(&all, cfg.lambda_reg)?;
                fr = Some(f);
                let u1 = out.pop().unwrap();
                let u0 = out.pop().unwrap();
                [u0, u1]
            }
        };

        let pooled = conv::avg_pool2(&fused[0]);
        let head_in = fusion::concat_features(&pooled, &fused[1])?;
        let head_map = conv::pointwise(&self.head_w, Some(&self.head_b), cfg.head_outputs(), &head_in);
        Ok(ForwardCache {
            mode,
            events: ev,
            frame: fr,
            proj_f,
            blocks,
            fused,
            head_in,
            head: HeadOutput {
                num_classes: cfg.num_classes,
                stride: cfg.stride() as f64,
                map: head_map,
            },
            fuse_reg,
        })
    }

    /// Gradients of `loss(head) + fuse_reg` given `d_head = dloss/dhead`.
    ///
    /// The result is a model-shaped container of gradients.
    pub fn backward(&self, cache: &ForwardCache, d_head: &FeatureMap) -> Result<ToyModel> {
        let cfg = &self.config;
        let [c1, _] = cfg.channels;
        let mut g = ToyModel::zeros(cfg.clone())?;
        let (d_hw, d_hb, d_head_in) = conv::pointwise_backward(&self.head_w, cfg.head_outputs(), &cache.head_in, d_head);
        g.head_w = d_hw;
        g.head_b = d_hb;
        let (d_pooled, d_u1) = fusion::split_features(&d_head_in, c1)?;
        let d_u0 = conv::avg_pool2_backward(&d_pooled, cache.fused[0].height, cache.fused[0].width);
        let d_u = [d_u0, d_u1];

        let n_slots = cache.events.len();
        // per slot: gradient on (a1, a2) from the fusion stage
        let mut d_ev: Vec<[FeatureMap; 2]> = Vec::with_capacity(n_slots);
        match cache.mode {
            DetectMode::EventOnly => {
                for _ in 0..n_slots {
                    d_ev.push([d_u[0].clone(), d_u[1].clone()]);
                }
            }
            DetectMode::Fused => {
                let fr = cache
                    .frame
                    .as_ref()
                    .ok_or_else(|| Error::State("fused cache without frame branch".into()))?;
                let all: Vec<&fusion::GateWeights> =
                    cache.blocks.iter().flat_map(|b| b.weights()).collect();
                let mut reg = fusion::fusion_regularizer_grad(&all, cfg.lambda_reg)?.into_iter();
                let mut d_f = Vec::with_capacity(2);
                let mut per_scale_e = Vec::with_capacity(2);
                for s in 0..2 {
                    let slot_reg: Vec<_> = reg.by_ref().take(n_slots).collect();
                    let pf = cache.proj_f[s]
                        .as_ref()
                        .ok_or_else(|| Error::State("missing projected frame features".into()))?;
                    let bg = cache.blocks[s].backward(&self.gates[s], pf, &d_u[s], &slot_reg)?;
                    g.gates[s].w = bg.d_w;
                    g.gates[s].sigma = bg.d_sigma;
                    let f_s = if s == 0 { &fr.a1 } else { &fr.a2 };
                    let c = cfg.channels[s];
                    let (d_p, _, d_f_proj) = conv::pointwise_backward(&self.proj[s], c, f_s, &bg.d_h_f_fuse);
                    g.proj[s] = d_p;
                    let mut df = bg.d_h_f_shared;
                    df.add_assign(&d_f_proj);
                    d_f.push(df);
                    per_scale_e.push(bg.d_h_e);
                }
                let e1 = per_scale_e.pop().unwrap();
                let e0 = per_scale_e.pop().unwrap();
                for (a, b) in e0.into_iter().zip(e1) {
                    d_ev.push([a, b]);
                }
                let d_f1 = d_f.pop().unwrap();
                let d_f0 = d_f.pop().unwrap();
                let (c1g, c2g) = branch_backward(&self.fr1, &self.fr2, fr, d_f0, d_f1);
                g.fr1.weight = c1g.d_weight;
                g.fr1.bias = c1g.d_bias;
                g.fr2.weight = c2g.d_weight;
                g.fr2.bias = c2g.d_bias;
            }
        }
        for (b, [d0, d1]) in cache.events.iter().zip(d_ev) {
            let (c1g, c2g) = branch_backward(&self.ev1, &self.ev2, b, d0, d1);
            add_into(&mut g.ev1.weight, &c1g.d_weight);
            add_into(&mut g.ev1.bias, &c1g.d_bias);
            add_into(&mut g.ev2.weight, &c2g.d_weight);
            add_into(&mut g.ev2.bias, &c2g.d_bias);
        }
        Ok(g)
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Backward through conv1 -> relu -> conv2 -> relu given gradients on both
/// activations.
fn branch_backward(
    c1: &Conv2d,
    c2: &Conv2d,
    b: &Branch,
    mut d_a1: FeatureMap,
    d_a2: FeatureMap,
) -> (conv::ConvGrads, conv::ConvGrads) {
    let d_pre2 = conv::relu_backward(&b.pre2, &d_a2);
    let (g2, d_in2) = c2.backward(&b.a1, &d_pre2, true);
    d_a1.add_assign(&d_in2.expect("requested input gradient"));
    let d_pre1 = conv::relu_backward(&b.pre1, &d_a1);
    let (g1, _) = c1.backward(&b.input, &d_pre1, false);
    (g1, g2)
}

/// Decode head activations into scored detections.
///
/// Every cell whose `sigmoid(obj) * sigmoid(best class)` reaches the model's
/// score threshold emits one detection; boxes are clipped to the sensor.
pub fn decode(head: &HeadOutput, config: &ModelConfig, t: crate::event::Micros) -> Vec<Detection> {
    let mut out = Vec::new();
    let (w, h) = (config.width as f64, config.height as f64);
    for cell in 0..head.cells() {
        let obj = sigmoid(head.at(head.obj_channel(), cell));
        let (best, logit) = (0..head.num_classes)
            .map(|k| (k, head.at(head.cls_channel(k), cell)))
            .fold((0, f64::NEG_INFINITY), |acc, (k, z)| if z > acc.1 { (k, z) } else { acc });
        let score = obj * sigmoid(logit);
        if score < config.score_threshold {
            continue;
        }
        if let Some(bbox) = head.decode_box(cell).clip(w, h) {
            out.push(Detection {
                bbox,
                class_id: best as u32,
                score,
                t,
            });
        }
    }
    out
}

/// Run the model on one event window (and frame in fused mode).
///
/// When the model fuses two frequency slots the same tensor feeds both.
pub fn detect(model: &ToyModel, events: &EventTensor, frame: &GrayImage, mode: DetectMode) -> Result<Vec<Detection>> {
    let slots: Vec<&EventTensor> = vec![events; model.config.frequency_slots];
    detect_slots(model, &slots, frame, mode)
}

/// Like [`detect`] with one tensor per frequency slot; the last slot's
/// window end stamps the detections.
pub fn detect_slots(model: &ToyModel, events: &[&EventTensor], frame: &GrayImage, mode: DetectMode) -> Result<Vec<Detection>> {
    let frame = match mode {
        DetectMode::Fused => Some(frame),
        DetectMode::EventOnly => None,
    };
    let t = events
        .last()
        .ok_or_else(|| Error::arg("no event tensor given"))?
        .window()
        .t2;
    // eval mode draws no noise; the generator is never consulted
    let mut rng = crate::seed::stream(0, "detect");
    let cache = model.forward(events, frame, mode, false, &mut rng)?;
    Ok(decode(&cache.head, &model.config, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{VoxelSpec, Window};
    use crate::seed;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            width: 8,
            height: 8,
            time_bins: 1,
            channels: [2, 2],
            kernel: 3,
            ..ModelConfig::default()
        }
    }

    fn tensor(cfg: &ModelConfig) -> EventTensor {
        EventTensor::zeros(
            VoxelSpec::new(cfg.time_bins, cfg.height, cfg.width).unwrap(),
            Window::new(0, 1000).unwrap(),
        )
    }

    fn frame(cfg: &ModelConfig, v: f64) -> GrayImage {
        GrayImage {
            width: cfg.width,
            height: cfg.height,
            pixels: vec![v; cfg.width * cfg.height],
        }
    }

    #[test]
    fn zero_model_emits_every_cell_at_quarter_score() {
        let cfg = tiny_config();
        let m = ToyModel::zeros(cfg.clone()).unwrap();
        let dets = detect(&m, &tensor(&cfg), &frame(&cfg, 0.5), DetectMode::Fused).unwrap();
        assert_eq!(dets.len(), 4);
        for d in &dets {
            assert!((d.score - 0.25).abs() < 1e-15);
            assert_eq!(d.class_id, 0);
            assert_eq!((d.bbox.width(), d.bbox.height()), (4.0, 4.0));
            assert_eq!(d.t, 1000);
        }
    }

    #[test]
    fn event_only_ignores_frame() {
        let cfg = ModelConfig {
            width: 16,
            height: 16,
            ..tiny_config()
        };
        let m = ToyModel::init(cfg.clone(), &mut seed::stream(1, seed::INIT)).unwrap();
        let mut t = tensor(&cfg);
        t = EventTensor::from_raw(t.spec(), t.window(), (0..t.data().len() as u32).map(|i| i % 3).collect()).unwrap();
        let head = |f: &GrayImage, mode| {
            let mut rng = seed::stream(0, "t");
            m.forward(&[&t], Some(f), mode, false, &mut rng).unwrap().head
        };
        let mut bright = frame(&cfg, 0.2);
        bright.pixels[17] = 0.9;
        assert_eq!(head(&frame(&cfg, 0.2), DetectMode::EventOnly), head(&bright, DetectMode::EventOnly));
        assert_ne!(head(&frame(&cfg, 0.2), DetectMode::Fused), head(&bright, DetectMode::Fused));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = tiny_config();
        let m = ToyModel::zeros(cfg.clone()).unwrap();
        let wrong = EventTensor::zeros(VoxelSpec::new(2, 8, 8).unwrap(), Window::new(0, 10).unwrap());
        assert!(detect(&m, &wrong, &frame(&cfg, 0.5), DetectMode::Fused).is_err());
        let small = GrayImage {
            width: 4,
            height: 4,
            pixels: vec![0.5; 16],
        };
        assert!(detect(&m, &tensor(&cfg), &small, DetectMode::Fused).is_err());
        assert!(ToyModel::zeros(ModelConfig { width: 6, ..cfg }).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let cfg = tiny_config();
        let m = ToyModel::init(cfg.clone(), &mut seed::stream(2, seed::INIT)).unwrap();
        let mut z = ToyModel::zeros(cfg).unwrap();
        z.set_flat_params(&m.flat_params()).unwrap();
        assert_eq!(z, m);
        assert!(z.set_flat_params(&[1.0]).is_err());
    }
}
