//! Per-layer activation statistics across training and bound checks over them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActivationTap;
use crate::tensor::{reduce_mean_var, Scalar, Tensor};

/// Mean and variance of one layer's activations on one mini-batch,
/// taken per unit across the batch and then averaged over units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    pub step: usize,
    /// 1-based weight-layer index.
    pub layer: usize,
    pub mean: f64,
    pub variance: f64,
}

impl LayerStats {
    /// Euclidean distance of `(mean, variance)` from `(0, 1)`.
    pub fn deviation(&self) -> f64 {
        self.mean.hypot(self.variance - 1.0)
    }
}

/// Statistics of `activations[batch, ...]`; trailing axes are flattened into units.
pub fn record<T: Scalar>(layer: usize, step: usize, activations: &Tensor<T>) -> Result<LayerStats> {
    let batch = activations.shape()[0];
    if batch < 2 {
        return Err(Error::InvalidBatch(format!(
            "layer statistics need at least 2 samples, got {batch}"
        )));
    }
    let units = activations.len() / batch;
    let flat = activations.clone().reshape(&[batch, units])?;
    let (mean, var) = reduce_mean_var(&flat)?;
    let avg = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).sum::<f64>() / units as f64;
    Ok(LayerStats {
        step,
        layer,
        mean: avg(&mean),
        variance: avg(&var).max(0.0),
    })
}

/// Which side of the activation function to measure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapPoint {
    #[default]
    Post,
    Pre,
}

/// Collects [`LayerStats`] from training forward passes at a fixed cadence.
#[derive(Clone, Debug)]
pub struct StatsRecorder {
    cadence: usize,
    point: TapPoint,
    step: usize,
    records: Vec<LayerStats>,
    error: Option<String>,
}

pub const DEFAULT_CADENCE: usize = 10;

impl StatsRecorder {
    /// Records on steps that are multiples of `cadence` (0 disables recording).
    pub fn new(cadence: usize, point: TapPoint) -> Self {
        StatsRecorder {
            cadence,
            point,
            step: 0,
            records: Vec::new(),
            error: None,
        }
    }

    /// Sets the training step that subsequent observations belong to.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn is_active(&self) -> bool {
        self.cadence > 0 && self.step % self.cadence == 0
    }

    pub fn records(&self) -> &[LayerStats] {
        &self.records
    }

    pub fn into_records(self) -> Result<Vec<LayerStats>> {
        match self.error {
            Some(e) => Err(Error::InvalidBatch(e)),
            None => Ok(self.records),
        }
    }
}

impl<T: Scalar> ActivationTap<T> for StatsRecorder {
    fn observe(&mut self, layer: usize, pre: &Tensor<T>, post: &Tensor<T>) {
        if !self.is_active() || self.error.is_some() {
            return;
        }
        let x = match self.point {
            TapPoint::Post => post,
            TapPoint::Pre => pre,
        };
        match record(layer, self.step, x) {
            Ok(r) => self.records.push(r),
            Err(e) => self.error = Some(e.to_string()),
        }
    }
}

pub const CSV_HEADER: &str = "step,layer,mean,variance";

/// Writes records sorted by `(step, layer)` with 17 significant digits.
pub fn export_csv<W: Write>(records: &[LayerStats], mut out: W) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.step, r.layer));
    let mut text = String::with_capacity(32 * (sorted.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in &sorted {
        text.push_str(&format!("{},{},{:.16e},{:.16e}\n", r.step, r.layer, r.mean, r.variance));
    }
    out.write_all(text.as_bytes()).map_err(Error::Write)?;
    out.flush().map_err(Error::Write)
}

pub fn import_csv<R: BufRead>(input: R) -> Result<Vec<LayerStats>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == CSV_HEADER => {}
        Some(Err(e)) => return Err(e.into()),
        _ => return Err(Error::Format(format!("stats CSV must start with `{CSV_HEADER}`"))),
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("stats CSV line {}: `{line}`", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        records.push(LayerStats {
            step: f[0].trim().parse().map_err(|_| bad())?,
            layer: f[1].trim().parse().map_err(|_| bad())?,
            mean: f[2].trim().parse().map_err(|_| bad())?,
            variance: f[3].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(records)
}

/// Worst-case statistics of one layer over the checked steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerVerdict {
    pub layer: usize,
    pub max_abs_mean: f64,
    pub max_variance: f64,
    pub records: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundsReport {
    pub mean_bound: f64,
    pub var_bound: f64,
    pub layers: Vec<LayerVerdict>,
}

impl BoundsReport {
    pub fn all_pass(&self) -> bool {
        self.layers.iter().all(|l| l.pass)
    }

    pub fn failing(&self) -> impl Iterator<Item = &LayerVerdict> {
        self.layers.iter().filter(|l| !l.pass)
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerVerdict> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// Per layer in `layers`: passes iff every record has `|mean| < mean_bound`
/// and `variance < var_bound`.
pub fn check_bounds(
    records: &[LayerStats],
    layers: RangeInclusive<usize>,
    mean_bound: f64,
    var_bound: f64,
) -> Result<BoundsReport> {
    if !(mean_bound > 0.0 && var_bound > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bounds must be positive, got mean {mean_bound}, variance {var_bound}"
        )));
    }
    let mut per_layer: BTreeMap<usize, LayerVerdict> = BTreeMap::new();
    for r in records.iter().filter(|r| layers.contains(&r.layer)) {
        let v = per_layer.entry(r.layer).or_insert(LayerVerdict {
            layer: r.layer,
            max_abs_mean: 0.0,
            max_variance: f64::NEG_INFINITY,
            records: 0,
            pass: true,
        });
        v.max_abs_mean = v.max_abs_mean.max(r.mean.abs());
        v.max_variance = v.max_variance.max(r.variance);
        v.records += 1;
        // written so that NaN fails
        v.pass &= r.mean.abs() < mean_bound && r.variance < var_bound;
    }
    if per_layer.is_empty() {
        return Err(Error::EmptyReport(format!(
            "no records for layers {}..={}",
            layers.start(),
            layers.end()
        )));
    }
    Ok(BoundsReport {
        mean_bound,
        var_bound,
        layers: per_layer.into_values().collect(),
    })
}
