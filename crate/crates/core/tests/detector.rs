mod common;

use common::smooth_model_case;
use evfuse::boxes::iou;
use evfuse::detector::{
    detect, detection_loss, fit, train_step, DetectMode, FitOptions, ModelConfig, ToyModel, TrainSample,
};
use evfuse::event::{voxelize, FrequencyPlan, VoxelSpec};
use evfuse::io::GrayImage;
use evfuse::seed;
use evfuse::synth::{generate_scene, Knot, ObjectSpec, SceneConfig, SceneSequence};
use evfuse::tune::sparse_samples;
use rand::Rng;

const MARGIN: f64 = 1e-3;

/// One car sweeping back and forth on a clean background.
fn single_object_scene(seed: u64) -> SceneSequence {
    let knots = (0..=8)
        .map(|k| Knot {
            t: k * 250_000,
            x: if k % 2 == 0 { 6.0 } else { 44.0 },
            y: 20.0 + (k % 3) as f64 * 8.0,
        })
        .collect();
    let config = SceneConfig {
        sensor_w: 64,
        sensor_h: 64,
        duration: 2_000_000,
        frame_hz: 20,
        contrast_threshold: 0.15,
        objects: vec![ObjectSpec {
            class_id: 0,
            size: [12.0, 8.0],
            trajectory: knots,
            intensity: 0.9,
            spawn_t: 0,
            despawn_t: 2_000_001,
        }],
        background_intensity: 0.3,
        noise_rate: 0.0,
        seed,
        micro_step_us: 500,
    };
    generate_scene(&config).unwrap()
}

fn one_to_one() -> FrequencyPlan {
    FrequencyPlan::new(20, 20).unwrap()
}

#[test]
fn model_gradients_match_finite_differences() {
    let mut rng = seed::stream(11, "model-fd");
    for mode in [DetectMode::EventOnly, DetectMode::Fused] {
        for _ in 0..6 {
            let case = smooth_model_case(&mut rng, mode, MARGIN);
            let err = case.max_rel_error();
            assert!(err <= common::FD_TOLERANCE, "{mode:?}: max relative error {err}");
        }
    }
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let scene = single_object_scene(1);
    let cfg = ModelConfig::default();
    let samples = sparse_samples(&cfg, &[scene], one_to_one(), DetectMode::EventOnly).unwrap();
    let batch: Vec<&TrainSample> = samples.iter().take(8).collect();
    let mut model = ToyModel::init(cfg, &mut seed::stream(1, seed::INIT)).unwrap();
    let mut rng = seed::stream(1, seed::TRAINING);
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(train_step(&mut model, &batch, 1e-3, DetectMode::EventOnly, &mut rng).unwrap().total);
    }
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "loss went up: {losses:?}");
    }
    assert!(losses[49] < losses[0]);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let scene = single_object_scene(2);
    let cfg = ModelConfig::default();
    let samples = sparse_samples(&cfg, &[scene], one_to_one(), DetectMode::Fused).unwrap();
    let batch: Vec<&TrainSample> = samples.iter().take(4).collect();
    let model = ToyModel::init(cfg, &mut seed::stream(2, seed::INIT)).unwrap();
    let mut stepped = model.clone();
    train_step(&mut stepped, &batch, 0.0, DetectMode::Fused, &mut seed::stream(2, seed::TRAINING)).unwrap();
    assert_eq!(stepped.flat_params(), model.flat_params());
    assert!(train_step(&mut stepped, &batch, -1.0, DetectMode::Fused, &mut seed::stream(2, seed::TRAINING)).is_err());
    assert!(train_step(&mut stepped, &[], 0.1, DetectMode::Fused, &mut seed::stream(2, seed::TRAINING)).is_err());
}

#[test]
fn training_is_deterministic() {
    let scene = single_object_scene(3);
    let cfg = ModelConfig::default();
    let samples = sparse_samples(&cfg, &[scene], one_to_one(), DetectMode::Fused).unwrap();
    let run = || {
        let mut m = ToyModel::init(cfg.clone(), &mut seed::stream(3, seed::INIT)).unwrap();
        let opts = FitOptions { epochs: 2, batch_size: 4, lr: 0.05, mode: DetectMode::Fused };
        let h = fit(&mut m, &samples, opts, &mut seed::stream(3, seed::TRAINING)).unwrap();
        (m.flat_params(), h)
    };
    assert_eq!(run(), run());
}

#[test]
fn learns_a_single_clean_object() {
    let scene = single_object_scene(4);
    let cfg = ModelConfig::default();
    let samples = sparse_samples(&cfg, std::slice::from_ref(&scene), one_to_one(), DetectMode::EventOnly).unwrap();
    let mut model = ToyModel::init(cfg.clone(), &mut seed::stream(4, seed::INIT)).unwrap();
    let opts = FitOptions { epochs: 60, batch_size: 8, lr: 0.05, mode: DetectMode::EventOnly };
    fit(&mut model, &samples, opts, &mut seed::stream(4, seed::TRAINING)).unwrap();

    let spec = VoxelSpec::new(cfg.time_bins, cfg.height, cfg.width).unwrap();
    let windows = scene.labeled_windows();
    let mut hits = 0;
    for w in &windows {
        let t = voxelize(&scene.events, *w, spec).unwrap();
        let frame = &scene.frame_at_or_before(w.t2).unwrap().image;
        let dets = detect(&model, &t, frame, DetectMode::EventOnly).unwrap();
        let gt = &scene.gt_at(w.t2).unwrap()[0];
        if let Some(top) = dets.first() {
            if top.class_id == gt.class_id && iou(&top.bbox, &gt.bbox).unwrap() >= 0.5 {
                hits += 1;
            }
        }
    }
    assert!(hits * 10 >= windows.len() * 9, "{hits} of {} windows localized", windows.len());
}

#[test]
fn event_only_ignores_the_frame() {
    let mut rng = seed::stream(5, "frame-invariance");
    let cfg = ModelConfig::default();
    let model = ToyModel::init(cfg.clone(), &mut rng).unwrap();
    let scene = single_object_scene(5);
    let w = scene.labeled_windows()[7];
    let t = voxelize(&scene.events, w, VoxelSpec::new(cfg.time_bins, cfg.height, cfg.width).unwrap()).unwrap();
    let mut noise = || GrayImage {
        width: 64,
        height: 64,
        pixels: (0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let (a, b) = (noise(), noise());
    assert_eq!(
        detect(&model, &t, &a, DetectMode::EventOnly).unwrap(),
        detect(&model, &t, &b, DetectMode::EventOnly).unwrap()
    );
    let head = |f: &GrayImage, mode| model.forward(&[&t], Some(f), mode, false, &mut seed::stream(0, "n")).unwrap().head;
    assert_eq!(head(&a, DetectMode::EventOnly), head(&b, DetectMode::EventOnly));
    assert_ne!(head(&a, DetectMode::Fused), head(&b, DetectMode::Fused));
}

#[test]
fn loss_terms_are_nonnegative_and_sum_to_total() {
    let mut rng = seed::stream(6, "loss-terms");
    for mode in [DetectMode::EventOnly, DetectMode::Fused] {
        for _ in 0..50 {
            let case = common::ModelCase::random(&mut rng, mode);
            let frame = (mode == DetectMode::Fused).then_some(&case.frame);
            let cache = case.model.forward(&[&case.events], frame, mode, true, &mut seed::stream(0, "n")).unwrap();
            let (l, _) = detection_loss(&cache.head, &case.gts);
            assert!(l.iou_loss >= 0.0 && l.cls_loss >= 0.0 && l.reg_loss >= 0.0 && cache.fuse_reg >= 0.0);
            let with = l.with_fuse_reg(cache.fuse_reg);
            let sum = with.iou_loss + with.cls_loss + with.reg_loss + with.fuse_reg;
            assert!((with.total - sum).abs() <= 1e-12 * sum.max(1.0), "{with:?}");
        }
    }
}
