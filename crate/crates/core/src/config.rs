//! Experiment configuration: one JSON document drives synth, train, tune
//! and eval.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmark::{standard_benchmark, BenchmarkConfig};
use crate::detector::{DetectMode, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{GtMode, SweepPoints};
use crate::event::FrequencyPlan;
use crate::synth::SceneConfig;
use crate::tune::TuneConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Where the train and test scenes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    /// The standard synthetic benchmark drawn from the experiment seed.
    Benchmark(BenchmarkConfig),
    /// Scene config files, relative to the experiment file.
    Files { train: Vec<PathBuf>, test: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs on full labeled windows.
    pub base_epochs: usize,
    /// Epochs on the last high-frequency sub-window of each labeled window.
    pub sparse_epochs: usize,
    pub mode: DetectMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.05,
            batch_size: 8,
            base_epochs: 40,
            sparse_epochs: 20,
            mode: DetectMode::Fused,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub points: SweepPoints,
    pub gt_mode: GtMode,
    pub nms_iou: f64,
    pub mode: DetectMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            points: SweepPoints::Offsets { n: 10 },
            gt_mode: GtMode::Exact,
            nms_iou: 0.5,
            mode: DetectMode::Fused,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root of every random stream; there is no default.
    pub seed: u64,
    pub scenes: SceneSource,
    /// Voxel grid, network shape and fusion settings.
    #[serde(default)]
    pub model: ModelConfig,
    pub plan: FrequencyPlan,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            scenes: SceneSource::Benchmark(BenchmarkConfig::default()),
            model: ModelConfig::default(),
            plan: FrequencyPlan::new(20, 180).expect("valid default plan"),
            training: TrainingConfig::default(),
            tune: TuneConfig::default(),
            eval: EvalConfig::default(),
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::data(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.plan.validate()?;
        self.tune.validate()?;
        let t = &self.training;
        if !(t.lr >= 0.0 && t.lr.is_finite()) || t.batch_size == 0 {
            return Err(Error::arg("training needs lr >= 0 and batch_size >= 1"));
        }
        if !(0.0..=1.0).contains(&self.eval.nms_iou) {
            return Err(Error::arg("eval nms_iou must lie in [0, 1]"));
        }
        match &self.eval.points {
            SweepPoints::Offsets { n } if *n == 0 => return Err(Error::arg("eval offsets need n >= 1")),
            SweepPoints::Frequencies(f) if f.is_empty() || f.iter().any(|v| !(*v > 0.0 && v.is_finite())) => {
                return Err(Error::arg("eval frequencies must be positive"))
            }
            _ => {}
        }
        if let SceneSource::Benchmark(b) = &self.scenes {
            if usize::from(b.sensor) != self.model.width || usize::from(b.sensor) != self.model.height {
                return Err(Error::arg(format!(
                    "benchmark sensor {} does not match model {}x{}",
                    b.sensor, self.model.width, self.model.height
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::data(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::json("experiment config", e))?;
        s.push('\n');
        Ok(s)
    }

    /// Load and validate; relative scene and output paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        if let SceneSource::Files { train, test } = &mut cfg.scenes {
            train.iter_mut().chain(test.iter_mut()).for_each(resolve);
        }
        Ok(cfg)
    }

    /// Train, test and despawn scene configs. File sources have no despawn
    /// scene.
    pub fn scene_configs(&self) -> Result<(Vec<SceneConfig>, Vec<SceneConfig>, Option<SceneConfig>)> {
        match &self.scenes {
            SceneSource::Benchmark(b) => {
                b.validate()?;
                let bench = standard_benchmark(b, self.seed);
                Ok((bench.train, bench.test, Some(bench.despawn)))
            }
            SceneSource::Files { train, test } => {
                let load = |ps: &[PathBuf]| -> Result<Vec<SceneConfig>> {
                    ps.iter()
                        .map(|p| {
                            let c: SceneConfig = crate::io::read_json(p)?;
                            c.validate()?;
                            Ok(c)
                        })
                        .collect()
                };
                Ok((load(train)?, load(test)?, None))
            }
        }
    }
}
