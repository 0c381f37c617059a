//! Reference implementations and checks shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use evfuse::benchmark::BenchmarkConfig;
use evfuse::boxes::{BBox, Detection, GroundTruthBox};
use evfuse::config::{ExperimentConfig, SceneSource};
use evfuse::detector::{detection_loss, loss::loss_kink_margin, DetectMode, ModelConfig, ToyModel};
use evfuse::eval::{EvalBundle, EvalImage};
use evfuse::event::{Event, EventStream, EventTensor, Micros, Polarity, VoxelSpec, Window};
use evfuse::fusion::{fusion_regularizer, fusion_regularizer_grad, FeatureMap, FusionBlock, GateParams, NoiseMode};
use evfuse::io::GrayImage;
use evfuse::seed;
use evfuse::tune::{calibrate, TuneConfig};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

// ---------------------------------------------------------------- events

pub fn random_stream<R: Rng>(rng: &mut R, w: u16, h: u16, n: usize, t0: Micros, t1: Micros) -> EventStream {
    let events = (0..n)
        .map(|_| {
            let p = Polarity::from_sign(if rng.random_bool(0.5) { 1 } else { -1 }).unwrap();
            Event::new(rng.random_range(0..w), rng.random_range(0..h), rng.random_range(t0..t1), p)
        })
        .collect();
    EventStream::from_unsorted(w, h, events).unwrap()
}

/// Per-event accumulation straight from the definition: the bin is the
/// number of bin edges `t1 + k * len / T` (k = 1..T-1) at or below `t`.
pub fn brute_voxelize(events: &[Event], window: Window, spec: VoxelSpec) -> Vec<u32> {
    let mut out = vec![0u32; 2 * spec.bins * spec.height * spec.width];
    let len = i128::from(window.t2 - window.t1);
    for e in events {
        if e.t < window.t1 || e.t >= window.t2 {
            continue;
        }
        let off = i128::from(e.t - window.t1);
        let mut bin = 0;
        for k in 1..spec.bins as i128 {
            if off * spec.bins as i128 >= k * len {
                bin += 1;
            }
        }
        let c = if e.p.sign() < 0 { 0 } else { 1 };
        let idx = ((c * spec.bins + bin) * spec.height + e.y as usize) * spec.width + e.x as usize;
        out[idx] += 1;
    }
    out
}

pub fn tensor_total(t: &EventTensor) -> u64 {
    t.data().iter().map(|&v| u64::from(v)).sum()
}

// ---------------------------------------------------------------- COCO

fn plain_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let ua = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

fn area(b: &BBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

/// Outcome of the first `k` ranked detections: (true positives, false positives).
fn prefix_counts(images: &[EvalImage], ranked: &[(usize, usize)], k: usize, class_id: u32, thr: f64, lo: f64, hi: f64) -> (usize, usize) {
    let mut used: Vec<Vec<bool>> = images.iter().map(|i| vec![false; i.gts.len()]).collect();
    let (mut tp, mut fp) = (0, 0);
    for &(ii, di) in &ranked[..k] {
        let d = &images[ii].detections[di];
        let mut pick: Option<usize> = None;
        for pass_ignored in [false, true] {
            let mut best = -1.0;
            for (gi, g) in images[ii].gts.iter().enumerate() {
                let ignored = !(area(&g.bbox) >= lo && area(&g.bbox) < hi);
                if g.class_id != class_id || used[ii][gi] || ignored != pass_ignored {
                    continue;
                }
                let v = plain_iou(&d.bbox, &g.bbox);
                if v >= thr && v > best {
                    best = v;
                    pick = Some(gi);
                }
            }
            if pick.is_some() {
                break;
            }
        }
        match pick {
            Some(gi) => {
                used[ii][gi] = true;
                let g = &images[ii].gts[gi];
                if area(&g.bbox) >= lo && area(&g.bbox) < hi {
                    tp += 1;
                }
            }
            None => {
                if area(&d.bbox) >= lo && area(&d.bbox) < hi {
                    fp += 1;
                }
            }
        }
    }
    (tp, fp)
}

/// AP by re-evaluating every score cutoff from scratch and taking, for each
/// of the 101 recall levels, the best precision among cutoffs reaching it.
pub fn brute_ap(images: &[EvalImage], class_id: u32, thr: f64, lo: f64, hi: f64) -> Option<f64> {
    let npos = images
        .iter()
        .flat_map(|i| &i.gts)
        .filter(|g| g.class_id == class_id && area(&g.bbox) >= lo && area(&g.bbox) < hi)
        .count();
    if npos == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (ii, img) in images.iter().enumerate() {
        for (di, d) in img.detections.iter().enumerate() {
            if d.class_id == class_id {
                ranked.push((ii, di));
            }
        }
    }
    // stable: equal scores keep image then input order
    ranked.sort_by(|a, b| {
        let (sa, sb) = (images[a.0].detections[a.1].score, images[b.0].detections[b.1].score);
        sb.partial_cmp(&sa).unwrap()
    });
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let (tp, fp) = prefix_counts(images, &ranked, k, class_id, thr, lo, hi);
        if tp + fp > 0 {
            points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    Some(sum / 101.0)
}

/// Every field of [`EvalBundle`] from [`brute_ap`].
pub fn brute_bundle(images: &[EvalImage]) -> EvalBundle {
    let classes: BTreeSet<u32> = images.iter().flat_map(|i| i.gts.iter().map(|g| g.class_id)).collect();
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let inf = f64::INFINITY;
    let stratum = |lo: f64, hi: f64, ts: &[f64]| {
        let vals: Vec<f64> = classes
            .iter()
            .flat_map(|&c| ts.iter().filter_map(move |&t| brute_ap(images, c, t, lo, hi)))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut per_class = std::collections::BTreeMap::new();
    for &c in &classes {
        let vals: Vec<f64> = thresholds.iter().filter_map(|&t| brute_ap(images, c, t, 0.0, inf)).collect();
        per_class.insert(c, vals.iter().sum::<f64>() / vals.len() as f64);
    }
    EvalBundle {
        map: stratum(0.0, inf, &thresholds),
        ap50: stratum(0.0, inf, &thresholds[0..1]),
        ap75: stratum(0.0, inf, &thresholds[5..6]),
        ap_s: stratum(0.0, 1024.0, &thresholds),
        ap_m: stratum(1024.0, 9216.0, &thresholds),
        ap_l: stratum(9216.0, inf, &thresholds),
        per_class,
    }
}

pub fn bundle_max_diff(a: &EvalBundle, b: &EvalBundle) -> f64 {
    let pairs = [(a.map, b.map), (a.ap50, b.ap50), (a.ap75, b.ap75), (a.ap_s, b.ap_s), (a.ap_m, b.ap_m), (a.ap_l, b.ap_l)];
    let mut m: f64 = 0.0;
    for (x, y) in pairs {
        match (x, y) {
            (Some(x), Some(y)) => m = m.max((x - y).abs()),
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    if a.per_class.keys().ne(b.per_class.keys()) {
        return f64::INFINITY;
    }
    for (k, v) in &a.per_class {
        m = m.max((v - b.per_class[k]).abs());
    }
    m
}

fn random_box<R: Rng>(rng: &mut R, max_side: f64) -> BBox {
    let x = rng.random_range(0.0..60.0);
    let y = rng.random_range(0.0..60.0);
    let w = rng.random_range(2.0..max_side);
    let h = rng.random_range(2.0..max_side);
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn jitter<R: Rng>(rng: &mut R, b: &BBox, amount: f64) -> BBox {
    let mut v = b.as_array();
    for x in &mut v {
        *x += rng.random_range(-amount..amount);
    }
    if v[2] <= v[0] + 0.5 {
        v[2] = v[0] + 0.5;
    }
    if v[3] <= v[1] + 0.5 {
        v[3] = v[1] + 0.5;
    }
    BBox::try_from(v).unwrap()
}

/// A small multi-image case with at most `max_boxes` boxes in total, mixing
/// near-hits, misses and boxes in every area stratum.
pub fn random_eval_case<R: Rng>(rng: &mut R, max_boxes: usize) -> Vec<EvalImage> {
    let n_images = rng.random_range(1..=3);
    let mut budget = rng.random_range(1..=max_boxes);
    let mut images = Vec::new();
    for i in 0..n_images {
        let mut img = EvalImage::default();
        let share = if i + 1 == n_images { budget } else { rng.random_range(0..=budget) };
        budget -= share;
        for _ in 0..share {
            let side = if rng.random_bool(0.2) { 130.0 } else { 45.0 };
            if rng.random_bool(0.45) {
                let g = GroundTruthBox::new(random_box(rng, side), rng.random_range(0..2), 0).unwrap();
                img.gts.push(g);
            } else {
                let bbox = match img.gts.last() {
                    Some(g) if rng.random_bool(0.7) => jitter(rng, &g.bbox, 3.0),
                    _ => random_box(rng, side),
                };
                let class_id = rng.random_range(0..2);
                img.detections.push(Detection::new(bbox, class_id, rng.random_range(0.0..1.0), 0).unwrap());
            }
        }
        images.push(img);
    }
    images
}

// ---------------------------------------------------------------- gradients

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_map<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize, scale: usize) -> FeatureMap {
    FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(), scale).unwrap()
}

/// A random fusion problem: two event-frequency slots, gate parameters and
/// an upstream weighting that turns the fused map into a scalar.
#[derive(Clone)]
pub struct FusionCase {
    pub params: GateParams,
    pub h_e: Vec<FeatureMap>,
    pub h_f_shared: FeatureMap,
    pub h_f_fuse: FeatureMap,
    pub upstream: FeatureMap,
    pub noise_seed: u64,
}

impl FusionCase {
    pub fn random<R: Rng>(rng: &mut R, lambda: f64) -> Self {
        let (c_e, c_f) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let mut params = GateParams::zeros(c_e + c_f);
        params.w.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
        params.sigma = rng.random_range(0.0..0.8);
        params.lambda_reg = lambda;
        FusionCase {
            params,
            h_e: (0..2).map(|_| random_map(rng, c_e, h, w, 0)).collect(),
            h_f_shared: random_map(rng, c_f, h, w, 0),
            h_f_fuse: random_map(rng, c_e, h, w, 0),
            upstream: random_map(rng, c_e, h, w, 0),
            noise_seed: rng.random(),
        }
    }

    /// `sum(upstream * fused) + regularizer`, with noise replayed from the seed.
    pub fn loss(&self) -> f64 {
        let mut block = FusionBlock::new();
        let mut rng = seed::stream(self.noise_seed, "fd-noise");
        let out = block
            .forward(&self.params, &self.h_e, &self.h_f_shared, &self.h_f_fuse, true, NoiseMode::PerLogit, &mut rng)
            .unwrap();
        let dot: f64 = out.data.iter().zip(&self.upstream.data).map(|(a, b)| a * b).sum();
        dot + fusion_regularizer(&block.weights(), self.params.lambda_reg).unwrap()
    }

    /// Analytic gradient flattened as `[W, sigma, h_e..., h_f_shared, h_f_fuse]`.
    pub fn analytic(&self) -> Vec<f64> {
        let mut block = FusionBlock::new();
        let mut rng = seed::stream(self.noise_seed, "fd-noise");
        block
            .forward(&self.params, &self.h_e, &self.h_f_shared, &self.h_f_fuse, true, NoiseMode::PerLogit, &mut rng)
            .unwrap();
        let reg = fusion_regularizer_grad(&block.weights(), self.params.lambda_reg).unwrap();
        let g = block.backward(&self.params, &self.h_f_fuse, &self.upstream, &reg).unwrap();
        let mut out = g.d_w.clone();
        out.push(g.d_sigma);
        for d in &g.d_h_e {
            out.extend(&d.data);
        }
        out.extend(&g.d_h_f_shared.data);
        out.extend(&g.d_h_f_fuse.data);
        out
    }

    fn value_mut(&mut self, mut i: usize) -> &mut f64 {
        if i < self.params.w.len() {
            return &mut self.params.w[i];
        }
        i -= self.params.w.len();
        if i == 0 {
            return &mut self.params.sigma;
        }
        i -= 1;
        for m in self.h_e.iter_mut() {
            if i < m.data.len() {
                return &mut m.data[i];
            }
            i -= m.data.len();
        }
        if i < self.h_f_shared.data.len() {
            return &mut self.h_f_shared.data[i];
        }
        i -= self.h_f_shared.data.len();
        &mut self.h_f_fuse.data[i]
    }

    /// Largest relative error between analytic and central-difference gradients.
    pub fn max_rel_error(&self) -> f64 {
        let analytic = self.analytic();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = self.clone();
            *plus.value_mut(i) += FD_STEP;
            let mut minus = self.clone();
            *minus.value_mut(i) -= FD_STEP;
            if minus.params.sigma < 0.0 {
                // one-sided at the sigma >= 0 boundary
                let fd = (plus.loss() - self.loss()) / FD_STEP;
                worst = worst.max(rel_err(a, fd).min((a - fd).abs() / 1e-3));
                continue;
            }
            let fd = (plus.loss() - minus.loss()) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, fd));
        }
        worst
    }
}

/// Miniature detector problem: 8x8 input, two channels per stage.
#[derive(Clone)]
pub struct ModelCase {
    pub model: ToyModel,
    pub events: EventTensor,
    pub frame: GrayImage,
    pub gts: Vec<GroundTruthBox>,
    pub mode: DetectMode,
    pub noise_seed: u64,
}

pub fn mini_config() -> ModelConfig {
    ModelConfig {
        width: 8,
        height: 8,
        time_bins: 2,
        channels: [2, 2],
        kernel: 3,
        num_classes: 2,
        lambda_reg: 0.1,
        ..ModelConfig::default()
    }
}

impl ModelCase {
    pub fn random<R: Rng>(rng: &mut R, mode: DetectMode) -> Self {
        let cfg = mini_config();
        let mut model = ToyModel::init(cfg.clone(), rng).unwrap();
        let mut flat = model.flat_params();
        flat.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        model.set_flat_params(&flat).unwrap();
        for g in &mut model.gates {
            g.sigma = rng.random_range(0.05..0.5);
        }
        let spec = VoxelSpec::new(cfg.time_bins, cfg.height, cfg.width).unwrap();
        let data = (0..spec.numel()).map(|_| rng.random_range(0..4)).collect();
        let events = EventTensor::from_raw(spec, Window::new(0, 1000).unwrap(), data).unwrap();
        let pixels = (0..64).map(|_| rng.random_range(0.2..1.0)).collect();
        let frame = GrayImage {
            width: 8,
            height: 8,
            pixels,
        };
        let n = rng.random_range(0..=2);
        let gts = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
                let (w, h) = (rng.random_range(1.5..3.0), rng.random_range(1.5..3.0));
                GroundTruthBox::new(BBox::new(x, y, x + w, y + h).unwrap(), rng.random_range(0..2), 0).unwrap()
            })
            .collect();
        ModelCase {
            model,
            events,
            frame,
            gts,
            mode,
            noise_seed: rng.random(),
        }
    }

    fn frame(&self) -> Option<&GrayImage> {
        (self.mode == DetectMode::Fused).then_some(&self.frame)
    }

    /// Detection loss plus fusion regularizer, and the distance of this
    /// point from every kink of the ReLUs and the loss.
    pub fn loss_and_margin(&self) -> (f64, f64) {
        let mut rng = seed::stream(self.noise_seed, "fd-noise");
        let cache = self.model.forward(&[&self.events], self.frame(), self.mode, true, &mut rng).unwrap();
        let (det, _) = detection_loss(&cache.head, &self.gts);
        let margin = cache.relu_margin().min(loss_kink_margin(&cache.head, &self.gts));
        (det.total + cache.fuse_reg, margin)
    }

    pub fn analytic(&self) -> Vec<f64> {
        let mut rng = seed::stream(self.noise_seed, "fd-noise");
        let cache = self.model.forward(&[&self.events], self.frame(), self.mode, true, &mut rng).unwrap();
        let (_, d_head) = detection_loss(&cache.head, &self.gts);
        self.model.backward(&cache, &d_head).unwrap().flat_params()
    }

    /// Largest relative error over all parameters with a nonzero role.
    pub fn max_rel_error(&self) -> f64 {
        let analytic = self.analytic();
        let base = self.model.flat_params();
        let mut worst: f64 = 0.0;
        let sigma_slots = self.sigma_indices();
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |v: f64| {
                let mut m = self.clone();
                let mut p = base.clone();
                p[i] = v;
                m.model.set_flat_params(&p).unwrap();
                m.loss_and_margin().0
            };
            let fd = if sigma_slots.contains(&i) && base[i] - FD_STEP < 0.0 {
                (eval(base[i] + FD_STEP) - eval(base[i])) / FD_STEP
            } else {
                (eval(base[i] + FD_STEP) - eval(base[i] - FD_STEP)) / (2.0 * FD_STEP)
            };
            worst = worst.max(rel_err(a, fd));
        }
        worst
    }

    fn sigma_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut off = 0;
        for (name, p) in self.model.params() {
            if name.ends_with("sigma") {
                out.push(off);
            }
            off += p.len();
        }
        out
    }
}

/// Draw cases until one sits at least `margin` away from every kink.
pub fn smooth_model_case<R: Rng>(rng: &mut R, mode: DetectMode, margin: f64) -> ModelCase {
    loop {
        let c = ModelCase::random(rng, mode);
        if c.loss_and_margin().1 >= margin {
            return c;
        }
    }
}

// ---------------------------------------------------------------- calibration

/// One object tracked through `n` windows with a slow drift, plus `spurious`
/// confident detections that each appear in a single window at a fresh spot.
pub fn calibration_with_spurious<R: Rng>(rng: &mut R, n: usize, spurious: usize) -> (Vec<Vec<Detection>>, Vec<Window>, Vec<BBox>) {
    let windows: Vec<Window> = (0..n as Micros).map(|i| Window::new(i * 100, (i + 1) * 100).unwrap()).collect();
    let mut per_window: Vec<Vec<Detection>> = vec![Vec::new(); n];
    for (i, w) in windows.iter().enumerate() {
        let b = BBox::new(10.0 + i as f64 * 0.3, 10.0, 22.0 + i as f64 * 0.3, 18.0).unwrap();
        per_window[i].push(Detection::new(b, 0, 0.9, w.t2).unwrap());
    }
    let mut planted = Vec::new();
    for k in 0..spurious {
        let w = k % n;
        // one grid cell per box keeps every spurious detection isolated
        let x = 30.0 + (k % 10) as f64 * 20.0 + rng.random_range(0.0..2.0);
        let y = 30.0 + (k / 10) as f64 * 20.0 + rng.random_range(0.0..2.0);
        let b = BBox::new(x, y, x + rng.random_range(4.0..12.0), y + rng.random_range(4.0..12.0)).unwrap();
        per_window[w].push(Detection::new(b, rng.random_range(0..2), 0.99, windows[w].t2).unwrap());
        planted.push(b);
    }
    (per_window, windows, planted)
}

/// Labels surviving calibration that coincide with a planted box.
pub fn surviving_spurious(per_window: &[Vec<Detection>], windows: &[Window], planted: &[BBox], config: &TuneConfig) -> usize {
    let (labels, _) = calibrate(per_window, &[], windows, config).unwrap();
    labels
        .windows
        .iter()
        .flatten()
        .filter(|l| planted.contains(&l.bbox))
        .count()
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, std::time::Duration) {
    let t0 = std::time::Instant::now();
    let v = f();
    (v, t0.elapsed())
}

// ---------------------------------------------------------------- experiments

/// A small but complete experiment: one 32x32 train scene and one test scene.
pub fn tiny_experiment(dir: &Path, seed: u64) -> PathBuf {
    let mut cfg = ExperimentConfig::new(seed, "out");
    cfg.scenes = SceneSource::Benchmark(BenchmarkConfig {
        sensor: 32,
        duration: 500_000,
        train_scenes: 1,
        test_scenes: 1,
        car_lanes: 1,
        pedestrians: 1,
        ..BenchmarkConfig::default()
    });
    cfg.model = ModelConfig {
        width: 32,
        height: 32,
        ..ModelConfig::default()
    };
    cfg.training.base_epochs = 2;
    cfg.training.sparse_epochs = 1;
    cfg.tune.min_track_len = 2;
    let p = dir.join("experiment.json");
    std::fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p
}
