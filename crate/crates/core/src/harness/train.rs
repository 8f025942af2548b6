//! Seeded mini-batch SGD with a plateau-halving schedule.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{context_frames, gen_synthetic, read_labels, stack_window, Corpus};
use crate::layers::{argmax_rows, softmax_xent};
use crate::model::{checkpoint, Network, Newbob};
use crate::runtime::io::read_features;
use crate::stats::{export_csv, LayerStats, StatsRecorder};
use crate::tensor::{Scalar, Tensor};

/// Rows per inference batch when evaluating; batchnorm needs at least two.
const EVAL_BATCH: usize = 256;
/// Training frames scored for the final training accuracy.
const TRAIN_ACCURACY_FRAMES: usize = 4_096;
/// Salt separating the batch-sampling stream from the init and data streams.
const SAMPLER_SALT: u64 = 0x5eed_ba7c_0000_0001;

pub const CHECKPOINT_FILE: &str = "checkpoint.sndc";
pub const STATS_FILE: &str = "stats.csv";
pub const LOG_FILE: &str = "train_log.csv";
pub const GRAD_NORMS_FILE: &str = "grad_norms.csv";
pub const SUMMARY_FILE: &str = "summary.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Corpus,
    pub holdout: Corpus,
}

impl Dataset {
    /// Generated data, or the feature/label files the config names.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.check_paths()?;
        let corpus = match (&cfg.data.features, &cfg.data.labels) {
            (Some(f), Some(l)) => {
                let stream = read_features::<f64>(f)?;
                let labels = read_labels(l)?;
                if labels.len() != stream.len() {
                    return Err(Error::Format(format!(
                        "{} has {} frames, {} has {} labels",
                        f.display(),
                        stream.len(),
                        l.display(),
                        labels.len()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&c| c >= cfg.model.output_dim) {
                    return Err(Error::Index {
                        index: bad,
                        bound: cfg.model.output_dim,
                    });
                }
                Corpus {
                    features: stream.frames().clone(),
                    labels,
                    classes: cfg.model.output_dim,
                }
            }
            _ => gen_synthetic(cfg.data_seed(), cfg.data.frames, cfg.data.classes)?,
        };
        let (train, holdout) = corpus.split(cfg.data.holdout)?;
        Ok(Dataset { train, holdout })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    /// Loss improved by at least the configured fraction.
    Trained,
    /// Loss stayed finite but did not improve enough (also for zero-step runs).
    Stalled,
    /// Loss became NaN or infinite.
    Diverged,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub network: Network<T>,
    pub status: RunStatus,
    pub log: Vec<StepLog>,
    /// `(step, holdout loss)` of each validation pass.
    pub validation: Vec<(usize, f64)>,
    /// Max-abs weight gradient per weight layer at step 0.
    pub grad_norms: Vec<(usize, f64)>,
    pub stats: Vec<LayerStats>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

impl<T> TrainOutcome<T> {
    /// `(first loss - mean of the last tenth) / first loss`.
    pub fn improvement(&self) -> f64 {
        let Some(first) = self.log.first() else { return 0.0 };
        let window = (self.log.len() / 10).clamp(1, 100);
        let tail = &self.log[self.log.len() - window..];
        let last = tail.iter().map(|s| s.loss).sum::<f64>() / window as f64;
        (first.loss - last) / first.loss
    }
}

/// Training-ready copy of a corpus in the working precision.
struct Frames<T> {
    features: Tensor<T>,
    labels: Vec<usize>,
    context: usize,
}

impl<T: Scalar> Frames<T> {
    fn new(c: &Corpus, context: usize) -> Self {
        Frames {
            features: c.features.cast(),
            labels: c.labels.clone(),
            context,
        }
    }

    fn batch(&self, frames: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = stack_window(&self.features, frames, self.context)?;
        Ok((x, frames.iter().map(|&t| self.labels[t]).collect()))
    }

    /// Evenly strided frames, at most `limit` (0 = all).
    fn subset(&self, limit: usize) -> Vec<usize> {
        let n = self.labels.len();
        let take = if limit == 0 { n } else { limit.min(n) };
        (0..take).map(|i| i * n / take).collect()
    }

    /// Mean loss and accuracy over `frames` with inference-mode passes.
    fn evaluate(&self, net: &Network<T>, frames: &[usize]) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for chunk in eval_chunks(frames) {
            let (x, y) = self.batch(&chunk)?;
            let logits = net.forward(&net.shape_input(x)?)?;
            let (l, _) = softmax_xent(&logits, &y)?;
            loss += l.as_f64() * chunk.len() as f64;
            correct += argmax_rows(&logits)?.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        let n = frames.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

/// Deals frames round-robin into batches of at most [`EVAL_BATCH`] rows, so
/// that each batch spans the whole set; batchnorm statistics of a batch of
/// neighbouring frames would cover only a few class segments.
fn eval_chunks(frames: &[usize]) -> Vec<Vec<usize>> {
    let count = frames.len().div_ceil(EVAL_BATCH);
    (0..count)
        .map(|j| frames.iter().skip(j).step_by(count).copied().collect())
        .collect()
}

/// Trains a freshly initialized network as the config describes.
pub fn train<T: Scalar>(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let net = Network::<T>::build(&cfg.model, cfg.seed)?;
    train_from(cfg, data, net)
}

/// Trains `net` in place of a fresh initialization.
pub fn train_from<T: Scalar>(cfg: &RunConfig, data: &Dataset, mut net: Network<T>) -> Result<TrainOutcome<T>> {
    let t = &cfg.training;
    let context = context_frames(&cfg.model)?;
    let train_set = Frames::<T>::new(&data.train, context);
    let holdout = Frames::<T>::new(&data.holdout, context);
    let eval_frames = holdout.subset(t.eval_frames);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT);
    let mut recorder = StatsRecorder::new(t.stats_cadence, t.stats_point);
    let mut schedule = Newbob::new(t.lr, t.newbob);

    let mut log = Vec::with_capacity(t.max_steps);
    let mut validation = Vec::new();
    let mut grad_norms = Vec::new();
    let mut diverged = false;
    let mut last_val: Option<f64> = None;
    let mut batch_idx = vec![0usize; t.batch];

    for step in 0..t.max_steps {
        batch_idx
            .iter_mut()
            .for_each(|i| *i = sampler.random_range(0..train_set.labels.len()));
        let (x, y) = train_set.batch(&batch_idx)?;
        recorder.set_step(step);
        let logits = net.forward_train_tapped(&net.shape_input(x)?, &mut recorder)?;
        let (loss, grad) = softmax_xent(&logits, &y)?;
        let loss = loss.as_f64();
        let lr = schedule.lr();
        log.push(StepLog { step, loss, lr });
        if !loss.is_finite() {
            diverged = true;
            net.clear_caches();
            break;
        }
        let grads = net.backward(&grad)?;
        if step == 0 {
            grad_norms = grads.weight_inf_norms(&net);
        }
        net.sgd_step(&grads, lr)?;

        if (step + 1) % t.eval_every == 0 {
            let (val, _) = holdout.evaluate(&net, &eval_frames)?;
            validation.push((step + 1, val));
            if let Some(prev) = last_val {
                let decision = schedule.step(prev, val);
                if decision.stop && t.early_stop {
                    break;
                }
            }
            last_val = Some(val);
        }
    }

    let stats = recorder.into_records()?;
    let (_, train_accuracy) = train_set.evaluate(&net, &train_set.subset(TRAIN_ACCURACY_FRAMES))?;
    let (_, holdout_accuracy) = holdout.evaluate(&net, &holdout.subset(0))?;
    let mut outcome = TrainOutcome {
        network: net,
        status: RunStatus::Stalled,
        log,
        validation,
        grad_norms,
        stats,
        train_accuracy,
        holdout_accuracy,
    };
    outcome.status = if diverged {
        RunStatus::Diverged
    } else if outcome.improvement() >= t.min_improvement {
        RunStatus::Trained
    } else {
        RunStatus::Stalled
    };
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub label: String,
    pub precision: &'static str,
    pub status: RunStatus,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_lr: Option<f64>,
    pub improvement: f64,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub checkpoint: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Trains and writes checkpoint, stats CSV, step log, step-0 gradient norms and a summary.
pub fn cmd_train<T: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    let data = Dataset::load(cfg)?;
    let outcome = train::<T>(cfg, &data)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;

    let ckpt = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&outcome.network, &ckpt)?;

    let stats_path = out_dir.join(STATS_FILE);
    let file = fs::File::create(&stats_path).map_err(|e| Error::file(&stats_path, e))?;
    export_csv(&outcome.stats, BufWriter::new(file))?;

    let mut text = String::from("step,loss,lr\n");
    for s in &outcome.log {
        let _ = writeln!(text, "{},{:e},{:e}", s.step, s.loss, s.lr);
    }
    write_text(&out_dir.join(LOG_FILE), &text)?;

    let mut text = String::from("layer,grad_inf_norm\n");
    for (layer, norm) in &outcome.grad_norms {
        let _ = writeln!(text, "{layer},{norm:e}");
    }
    write_text(&out_dir.join(GRAD_NORMS_FILE), &text)?;

    let summary = TrainSummary {
        label: cfg.model.label(),
        precision: T::NAME,
        status: outcome.status,
        steps: outcome.log.len(),
        first_loss: outcome.log.first().map(|s| s.loss),
        final_loss: outcome.log.last().map(|s| s.loss),
        final_lr: outcome.log.last().map(|s| s.lr),
        improvement: outcome.improvement(),
        train_accuracy: outcome.train_accuracy,
        holdout_accuracy: outcome.holdout_accuracy,
        checkpoint: ckpt,
    };
    write_text(&out_dir.join(SUMMARY_FILE), &toml::to_string(&summary).map_err(Error::config)?)?;
    Ok(summary)
}
