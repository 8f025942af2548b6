//! Seeded synthetic filterbank-like data and context-window batching.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StackKind, FEATURE_DIM};
use crate::runtime::FrameStream;
use crate::tensor::{Scalar, Tensor};

/// Spread of the class means relative to the unit-variance frame noise.
pub const CLASS_SEPARATION: f64 = 0.45;
/// Lag-one correlation of the per-dimension noise process.
pub const NOISE_CORRELATION: f64 = 0.8;
/// Class segments last between these many frames.
pub const SEGMENT_FRAMES: (usize, usize) = (8, 40);

/// Frames and per-frame labels of one utterance-like stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits off the last `holdout` frames.
    pub fn split(self, holdout: usize) -> Result<(Corpus, Corpus)> {
        if holdout >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "holdout of {holdout} frames leaves nothing to train on ({} frames)",
                self.len()
            )));
        }
        let cut = self.len() - holdout;
        let data = self.features.into_data();
        let (train_x, hold_x) = data.split_at(cut * FEATURE_DIM);
        let (train_y, hold_y) = self.labels.split_at(cut);
        let part = |x: &[f64], y: &[usize]| -> Result<Corpus> {
            Ok(Corpus {
                features: Tensor::new(vec![y.len(), FEATURE_DIM], x.to_vec())?,
                labels: y.to_vec(),
                classes: self.classes,
            })
        };
        Ok((part(train_x, train_y)?, part(hold_x, hold_y)?))
    }

    pub fn stream<T: Scalar>(&self) -> Result<FrameStream<T>> {
        FrameStream::new(self.features.cast())
    }
}

/// Class-conditional frames: piecewise-constant class segments, a per-class
/// mean vector, smoothed Gaussian noise, then per-dimension standardization.
pub fn gen_synthetic(seed: u64, total: usize, classes: usize) -> Result<Corpus> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if total == 0 {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..classes * FEATURE_DIM)
        .map(|_| CLASS_SEPARATION * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut labels = Vec::with_capacity(total);
    while labels.len() < total {
        let class = rng.random_range(0..classes);
        let run = rng.random_range(SEGMENT_FRAMES.0..=SEGMENT_FRAMES.1);
        labels.extend(std::iter::repeat_n(class, run.min(total - labels.len())));
    }

    let rho = NOISE_CORRELATION;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut noise: Vec<f64> = (0..FEATURE_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut data = Vec::with_capacity(total * FEATURE_DIM);
    for &class in &labels {
        let mean = &means[class * FEATURE_DIM..(class + 1) * FEATURE_DIM];
        for (d, n) in noise.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *n = rho * *n + innovation * e;
            data.push(mean[d] + *n);
        }
    }
    standardize(&mut data, total);
    Ok(Corpus {
        features: Tensor::new(vec![total, FEATURE_DIM], data)?,
        labels,
        classes,
    })
}

/// Per-dimension zero mean and unit (population) variance.
fn standardize(data: &mut [f64], frames: usize) {
    for d in 0..FEATURE_DIM {
        let column = || data.iter().skip(d).step_by(FEATURE_DIM);
        let mean = column().sum::<f64>() / frames as f64;
        let var = column().map(|v| (v - mean).powi(2)).sum::<f64>() / frames as f64;
        let scale = if var > 0.0 { var.sqrt().recip() } else { 1.0 };
        for v in data.iter_mut().skip(d).step_by(FEATURE_DIM) {
            *v = (*v - mean) * scale;
        }
    }
}

/// Reads a label file: one class index per line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}:{}: not a label: {l:?}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Frames of context a model consumes per scored frame.
pub fn context_frames(cfg: &ModelConfig) -> Result<usize> {
    let frames = match cfg.stack {
        StackKind::Dnn => {
            if !cfg.input_dim.is_multiple_of(FEATURE_DIM) {
                return Err(Error::config(format!(
                    "input_dim {} is not a whole number of {FEATURE_DIM}-dim frames",
                    cfg.input_dim
                )));
            }
            cfg.input_dim / FEATURE_DIM
        }
        StackKind::CnnBottleneck => {
            let [h, w] = cfg.image_hw();
            if w != FEATURE_DIM {
                return Err(Error::config(format!("input_hw width {w} must be {FEATURE_DIM}")));
            }
            h
        }
    };
    if frames % 2 == 0 {
        return Err(Error::config(format!("context of {frames} frames has no center frame")));
    }
    Ok(frames)
}

/// Stacks `context` frames centred on each of `frames` (edges replicate) into `[n, context * 40]`.
pub fn stack_window<T: Scalar>(features: &Tensor<T>, frames: &[usize], context: usize) -> Result<Tensor<T>> {
    let total = features.shape()[0];
    let side = context / 2;
    let src = features.data();
    let mut out = Vec::with_capacity(frames.len() * context * FEATURE_DIM);
    for &t in frames {
        if t >= total {
            return Err(Error::Index { index: t, bound: total });
        }
        for slot in 0..context {
            let s = (t + slot).saturating_sub(side).min(total - 1);
            out.extend_from_slice(&src[s * FEATURE_DIM..(s + 1) * FEATURE_DIM]);
        }
    }
    Tensor::new(vec![frames.len(), context * FEATURE_DIM], out)
}
