//! The standard synthetic benchmark: fast cars, slow pedestrians, and a
//! scene whose objects vanish between frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::Micros;
use crate::seed;
use crate::synth::{Knot, ObjectSpec, SceneConfig, DEFAULT_MICRO_STEP_US};

pub const CAR: u32 = 0;
pub const PEDESTRIAN: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub sensor: u16,
    pub duration: Micros,
    pub frame_hz: u32,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Parallel car lanes per scene; each lane spawns cars back to back.
    pub car_lanes: usize,
    pub pedestrians: usize,
    /// Car speed range in px/s.
    pub car_speed: [f64; 2],
    pub pedestrian_speed: [f64; 2],
    pub contrast_threshold: f64,
    pub background_intensity: f64,
    pub noise_rate: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            sensor: 64,
            duration: 2_000_000,
            frame_hz: 20,
            train_scenes: 6,
            test_scenes: 3,
            car_lanes: 2,
            pedestrians: 2,
            car_speed: [30.0, 60.0],
            pedestrian_speed: [10.0, 30.0],
            contrast_threshold: 0.15,
            background_intensity: 0.35,
            noise_rate: 0.5,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sensor < 16 || self.frame_hz == 0 || self.duration <= 0 {
            return Err(Error::arg("benchmark needs sensor >= 16, frame_hz > 0 and duration > 0"));
        }
        if 1_000_000 % Micros::from(self.frame_hz) != 0 {
            return Err(Error::arg(format!("frame_hz {} must divide one second", self.frame_hz)));
        }
        for (name, r) in [("car_speed", self.car_speed), ("pedestrian_speed", self.pedestrian_speed)] {
            if !(r[0] > 0.0 && r[0] < r[1] && r[1].is_finite()) {
                return Err(Error::arg(format!("{name} must be an increasing positive range")));
            }
        }
        Ok(())
    }
}

pub const CAR_SIZE: [f64; 2] = [12.0, 8.0];
pub const PEDESTRIAN_SIZE: [f64; 2] = [4.0, 8.0];

fn intensity<R: Rng>(rng: &mut R, bright: f64, dark: f64) -> f64 {
    if rng.random_bool(0.5) {
        bright
    } else {
        dark
    }
}

fn base(cfg: &BenchmarkConfig, scene_seed: u64) -> SceneConfig {
    SceneConfig {
        sensor_w: cfg.sensor,
        sensor_h: cfg.sensor,
        duration: cfg.duration,
        frame_hz: cfg.frame_hz,
        contrast_threshold: cfg.contrast_threshold,
        objects: Vec::new(),
        background_intensity: cfg.background_intensity,
        noise_rate: cfg.noise_rate,
        seed: scene_seed,
        micro_step_us: DEFAULT_MICRO_STEP_US,
    }
}

/// Piecewise-linear wander inside the sensor with a new heading every 0.5 s.
fn wander<R: Rng>(rng: &mut R, cfg: &BenchmarkConfig, size: [f64; 2], speed: [f64; 2], t0: Micros, t1: Micros) -> Vec<Knot> {
    let s = f64::from(cfg.sensor);
    let (max_x, max_y) = (s - size[0], s - size[1]);
    let mut x = rng.random_range(0.0..max_x);
    let mut y = rng.random_range(0.0..max_y);
    let mut knots = vec![Knot { t: t0, x, y }];
    let leg: Micros = 500_000;
    let mut t = t0;
    while t < t1 {
        let dt = leg.min(t1 - t);
        let v = rng.random_range(speed[0]..speed[1]);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let d = v * dt as f64 * 1e-6;
        x = (x + d * a.cos()).clamp(0.0, max_x);
        y = (y + d * a.sin()).clamp(0.0, max_y);
        t += dt;
        knots.push(Knot { t, x, y });
    }
    knots
}

/// Cars crossing horizontally in lanes plus wandering pedestrians.
pub fn traffic_scene(cfg: &BenchmarkConfig, seed: u64, index: u64) -> SceneConfig {
    let mut rng = seed::indexed_stream(seed, seed::SCENE, index);
    let mut scene = base(cfg, seed::derive_seed(seed, &format!("scene-{index}")));
    let s = f64::from(cfg.sensor);
    let lane_h = (s - CAR_SIZE[1]) / cfg.car_lanes.max(1) as f64;
    for lane in 0..cfg.car_lanes {
        let y = lane as f64 * lane_h + rng.random_range(0.0..(lane_h - CAR_SIZE[1]).max(0.0) + 1e-9);
        let mut t: Micros = rng.random_range(0..200_000);
        while t < cfg.duration {
            let v = rng.random_range(cfg.car_speed[0]..cfg.car_speed[1]);
            let travel = s + CAR_SIZE[0];
            let dur = (travel / v * 1e6).ceil() as Micros;
            let rightward = rng.random_bool(0.5);
            let (x0, x1) = if rightward { (-CAR_SIZE[0], s) } else { (s, -CAR_SIZE[0]) };
            scene.objects.push(ObjectSpec {
                class_id: CAR,
                size: CAR_SIZE,
                trajectory: vec![Knot { t, x: x0, y }, Knot { t: t + dur, x: x1, y }],
                intensity: intensity(&mut rng, 0.85, 0.08),
                spawn_t: t,
                despawn_t: t + dur,
            });
            t += dur + rng.random_range(0..300_000);
        }
    }
    for _ in 0..cfg.pedestrians {
        let knots = wander(&mut rng, cfg, PEDESTRIAN_SIZE, cfg.pedestrian_speed, 0, cfg.duration);
        scene.objects.push(ObjectSpec {
            class_id: PEDESTRIAN,
            size: PEDESTRIAN_SIZE,
            trajectory: knots,
            intensity: intensity(&mut rng, 0.75, 0.12),
            spawn_t: 0,
            despawn_t: cfg.duration + 1,
        });
    }
    scene
}

/// Traffic whose cars appear on frame times and vanish between frames.
///
/// Cars are drawn like the training traffic but spawn inside the sensor at
/// a frame timestamp and despawn, still inside, strictly within a later
/// frame interval. Pedestrians persist as in the traffic scenes.
pub fn despawn_scene(cfg: &BenchmarkConfig, seed: u64) -> SceneConfig {
    let mut rng = seed::indexed_stream(seed, seed::SCENE, u64::MAX);
    let mut scene = base(cfg, seed::derive_seed(seed, "scene-despawn"));
    let period = 1_000_000 / Micros::from(cfg.frame_hz);
    let frames = cfg.duration / period;
    let s = f64::from(cfg.sensor);
    let max_x = s - CAR_SIZE[0];
    let lane_h = (s - CAR_SIZE[1]) / cfg.car_lanes.max(1) as f64;
    for lane in 0..cfg.car_lanes {
        let y = lane as f64 * lane_h + rng.random_range(0.0..(lane_h - CAR_SIZE[1]).max(0.0) + 1e-9);
        let mut k: Micros = rng.random_range(0..2);
        while k + 3 < frames {
            let full: Micros = rng.random_range(1..3);
            let spawn = k * period;
            let despawn = spawn + full * period + rng.random_range(period * 3 / 10..period * 9 / 10);
            let v = rng.random_range(cfg.car_speed[0]..cfg.car_speed[1]);
            let travel = (v * (despawn - spawn) as f64 * 1e-6).min(max_x);
            let start = rng.random_range(0.0..(max_x - travel) + 1e-9);
            let (x0, x1) = if rng.random_bool(0.5) {
                (start, start + travel)
            } else {
                (max_x - start, max_x - start - travel)
            };
            scene.objects.push(ObjectSpec {
                class_id: CAR,
                size: CAR_SIZE,
                trajectory: vec![Knot { t: spawn, x: x0, y }, Knot { t: despawn, x: x1, y }],
                intensity: intensity(&mut rng, 0.85, 0.08),
                spawn_t: spawn,
                despawn_t: despawn,
            });
            k += full + 1 + rng.random_range(0..2);
        }
    }
    for _ in 0..cfg.pedestrians {
        let knots = wander(&mut rng, cfg, PEDESTRIAN_SIZE, cfg.pedestrian_speed, 0, cfg.duration);
        scene.objects.push(ObjectSpec {
            class_id: PEDESTRIAN,
            size: PEDESTRIAN_SIZE,
            trajectory: knots,
            intensity: intensity(&mut rng, 0.75, 0.12),
            spawn_t: 0,
            despawn_t: cfg.duration + 1,
        });
    }
    scene
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub train: Vec<SceneConfig>,
    pub test: Vec<SceneConfig>,
    pub despawn: SceneConfig,
}

pub fn standard_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Benchmark {
    let n_train = cfg.train_scenes as u64;
    Benchmark {
        train: (0..n_train).map(|i| traffic_scene(cfg, seed, i)).collect(),
        test: (0..cfg.test_scenes as u64)
            .map(|i| traffic_scene(cfg, seed, n_train + i))
            .collect(),
        despawn: despawn_scene(cfg, seed),
    }
}
