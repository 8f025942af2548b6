//! Run configuration files (TOML, unknown keys rejected).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::context_frames;
use crate::model::{ModelConfig, NewbobParams};
use crate::runtime::DEFAULT_SKIP;
use crate::stats::{TapPoint, DEFAULT_CADENCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model init, data generation and batch sampling.
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generator seed; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub frames: usize,
    pub classes: usize,
    /// Trailing frames held out for validation.
    pub holdout: usize,
    /// Feature file to use instead of generated data; needs `labels` too.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: None,
            frames: 20_000,
            classes: 8,
            holdout: 2_000,
            features: None,
            labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    /// Steps between validation passes that drive the learning-rate schedule.
    pub eval_every: usize,
    /// Holdout frames per validation pass (0 = all).
    pub eval_frames: usize,
    pub newbob: NewbobParams,
    /// End the run when the schedule says so; otherwise only the rate changes.
    pub early_stop: bool,
    /// Steps between activation-statistics records (0 disables).
    pub stats_cadence: usize,
    pub stats_point: TapPoint,
    /// Minimum relative loss improvement for a run to count as learning.
    pub min_improvement: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.01,
            batch: 256,
            max_steps: 2_000,
            eval_every: 200,
            eval_frames: 1_024,
            newbob: NewbobParams::default(),
            early_stop: true,
            stats_cadence: DEFAULT_CADENCE,
            stats_point: TapPoint::Post,
            min_improvement: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
    pub skip: usize,
    pub active_fraction: f64,
    /// Length of the scored stream for inference rows.
    pub frames: usize,
    /// Batch of the training-step rows.
    pub train_batch: usize,
    /// Pipeline queue capacity.
    pub capacity: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: 10,
            warmup: 3,
            skip: DEFAULT_SKIP,
            active_fraction: 0.05,
            frames: 300,
            train_batch: 32,
            capacity: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    pub fn new(seed: u64, model: ModelConfig) -> Self {
        RunConfig {
            seed,
            model,
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            bench: BenchConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(Error::config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(Error::config)
    }

    /// Parses a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.features, &mut cfg.data.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        context_frames(&self.model)?;
        let t = &self.training;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::config(format!("training.lr must be positive, got {}", t.lr)));
        }
        if t.batch == 0 {
            return Err(Error::config("training.batch must be >= 1"));
        }
        if t.eval_every == 0 {
            return Err(Error::config("training.eval_every must be >= 1"));
        }
        let d = &self.data;
        if d.features.is_some() != d.labels.is_some() {
            return Err(Error::config("data.features and data.labels go together"));
        }
        if d.features.is_none() && d.classes != self.model.output_dim {
            return Err(Error::config(format!(
                "data.classes {} differs from model.output_dim {}",
                d.classes, self.model.output_dim
            )));
        }
        let b = &self.bench;
        if b.repetitions == 0 || b.skip == 0 || b.frames == 0 || b.train_batch == 0 || b.capacity == 0 {
            return Err(Error::config(
                "bench.repetitions, skip, frames, train_batch and capacity must be >= 1",
            ));
        }
        if !(b.active_fraction > 0.0 && b.active_fraction <= 1.0) {
            return Err(Error::config(format!(
                "bench.active_fraction must lie in (0, 1], got {}",
                b.active_fraction
            )));
        }
        Ok(())
    }

    /// Fails unless every input file named by the config exists.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.data.features, &self.data.labels].into_iter().flatten() {
            fs::metadata(p).map_err(|e| Error::file(p, e))?;
        }
        Ok(())
    }
}
