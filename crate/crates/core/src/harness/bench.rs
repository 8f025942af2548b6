//! Throughput benchmarks over the topology grid and the scoring techniques.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::{BenchConfig, RunConfig};
use crate::harness::data::gen_synthetic;
use crate::layers::{softmax_xent, Activation};
use crate::model::{ModelConfig, Network};
use crate::runtime::{pipeline_run, reference_run, ActiveSource, FrameStream, SkipSchedule};
use crate::tensor::{Scalar, Tensor};

pub const BENCH_HEADER: &str = "label,fps,ms_per_batch,multiplies,speedup_pct_vs_baseline";
pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_META_FILE: &str = "bench_meta.toml";

/// A median below this many timer ticks is too coarse to compare.
const MIN_TICKS: f64 = 1_000.0;

/// One benchmark row. `speedup_pct` is the frames-per-second gain over `baseline`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub label: String,
    pub baseline: String,
    pub fps: f64,
    /// Median wall-clock of one repetition (one training batch, or one pass over the stream).
    pub ms_per_batch: f64,
    /// Exact multiply count of one repetition; training rows count the forward pass.
    pub multiplies: u64,
    pub speedup_pct: f64,
}

impl BenchReport {
    /// Wall-clock reduction relative to a baseline row, as a fraction.
    pub fn time_reduction_vs(&self, baseline: &BenchReport) -> f64 {
        1.0 - self.ms_per_batch / baseline.ms_per_batch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchMeta {
    pub precision: &'static str,
    /// Threads doing arithmetic in training rows and serial scoring.
    pub compute_threads: usize,
    /// Threads of the two-stage scoring pipeline.
    pub pipeline_threads: usize,
    pub available_parallelism: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub frames: usize,
    pub train_batch: usize,
    pub timer_resolution_ns: u64,
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    (0..16)
        .map(|_| {
            let a = Instant::now();
            loop {
                let d = a.elapsed();
                if !d.is_zero() {
                    break d;
                }
            }
        })
        .min()
        .unwrap_or(Duration::from_nanos(1))
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => samples[n / 2],
        _ => 0.5 * (samples[n / 2 - 1] + samples[n / 2]),
    }
}

/// Median seconds of `f` over `repetitions` runs after `warmup` unrecorded runs.
pub fn time_median(bench: &BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..bench.warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(bench.repetitions);
    for _ in 0..bench.repetitions {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    let m = median(&mut samples);
    let floor = timer_resolution().as_secs_f64() * MIN_TICKS;
    if m < floor {
        return Err(Error::Bench(format!(
            "median {:.3e} s is below {MIN_TICKS} timer ticks ({floor:.3e} s); \
             increase bench.frames or bench.train_batch",
            m
        )));
    }
    Ok(m)
}

/// The four topologies compared against the shortcut+batchnorm RELU baseline, baseline first.
pub fn topology_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    let variant = |act, sc: bool, bn: bool| {
        let mut c = base.clone();
        c.activation = act;
        c.shortcut = sc.into();
        c.batchnorm = bn.into();
        c.conv_bias = None;
        c.init_override = None;
        c
    };
    vec![
        variant(Activation::Relu, true, true),
        variant(Activation::Relu, false, true),
        variant(Activation::Relu, true, false),
        variant(Activation::Selu, false, false),
    ]
}

/// How the output layer is evaluated in an inference row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scoring {
    /// Single-threaded, every output.
    Serial,
    /// Two-stage pipeline, every output.
    Pipeline,
    /// Two-stage pipeline, a seeded fraction of outputs per frame.
    Lazy { fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub seconds: f64,
    pub multiplies: u64,
    pub frames: usize,
}

/// Median time to score the whole stream.
pub fn measure_inference<T: Scalar>(
    net: &Network<T>,
    stream: &FrameStream<T>,
    skip: usize,
    scoring: Scoring,
    bench: &BenchConfig,
    seed: u64,
) -> Result<Measurement> {
    let schedule = SkipSchedule::new(stream.len(), skip)?;
    let d_out = net.config().output_dim;
    let source = match scoring {
        Scoring::Lazy { fraction } => ActiveSource::Fraction { p: fraction, seed },
        _ => ActiveSource::All,
    };
    let active = |t: usize| source.for_frame(t, d_out);
    let mut multiplies = 0;
    let seconds = time_median(bench, || {
        let run = match scoring {
            Scoring::Serial => reference_run(net, stream, &schedule, active)?,
            _ => pipeline_run(net, stream, &schedule, active, bench.capacity)?,
        };
        multiplies = run.counters.hidden_multiplies + run.counters.output_multiplies;
        Ok(())
    })?;
    Ok(Measurement {
        seconds,
        multiplies,
        frames: stream.len(),
    })
}

/// Median time of forward, backward and update on one seeded batch.
pub fn measure_train_step<T: Scalar>(net: &mut Network<T>, batch: usize, bench: &BenchConfig, seed: u64) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = net.config().input_dim;
    let classes = net.config().output_dim;
    let x = Tensor::<T>::from_fn(&[batch, input_dim], |_| T::from_f64(rng.sample(StandardNormal)));
    let x = net.shape_input(x)?;
    let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let seconds = time_median(bench, || {
        let logits = net.forward_train(&x)?;
        let (_, g) = softmax_xent(&logits, &y)?;
        let grads = net.backward(&g)?;
        // a zero step keeps every repetition on identical weights
        net.sgd_step(&grads, 0.0)
    })?;
    Ok(Measurement {
        seconds,
        multiplies: net.ops().multiplies() * batch as u64,
        frames: batch,
    })
}

fn row(label: String, baseline: &str, m: Measurement, base: Option<&BenchReport>) -> BenchReport {
    let fps = m.frames as f64 / m.seconds;
    BenchReport {
        speedup_pct: base.map_or(0.0, |b| (fps / b.fps - 1.0) * 100.0),
        baseline: baseline.to_string(),
        label,
        fps,
        ms_per_batch: m.seconds * 1e3,
        multiplies: m.multiplies,
    }
}

/// Runs the full grid: per topology a training and an inference row, then
/// skipping, serial and lazy scoring rows on the last (self-normalizing) topology.
pub fn run_bench<T: Scalar>(cfg: &RunConfig) -> Result<(Vec<BenchReport>, BenchMeta)> {
    cfg.validate()?;
    let b = &cfg.bench;
    let corpus = gen_synthetic(cfg.data_seed(), b.frames, 2)?;
    let stream: FrameStream<T> = corpus.stream()?;
    let mut reports: Vec<BenchReport> = Vec::new();
    let grid = topology_grid(&cfg.model);
    let mut nets = Vec::with_capacity(grid.len());

    for (phase, prefix) in [(0, "train"), (1, "infer")] {
        let mut baseline: Option<BenchReport> = None;
        for (i, model) in grid.iter().enumerate() {
            let label = format!("{prefix}/{}", model.label());
            let base_label = baseline.as_ref().map_or(label.clone(), |r| r.label.clone());
            let m = if phase == 0 {
                let mut net = Network::<T>::build(model, cfg.seed)?;
                let m = measure_train_step(&mut net, b.train_batch, b, cfg.seed)?;
                net.clear_caches();
                nets.push(net);
                m
            } else {
                measure_inference(&nets[i], &stream, 1, Scoring::Pipeline, b, cfg.seed)?
            };
            let r = row(label, &base_label, m, baseline.as_ref());
            if baseline.is_none() {
                baseline = Some(r.clone());
            }
            reports.push(r);
        }
    }

    let net = nets.last().ok_or_else(|| Error::Bench("empty topology grid".into()))?;
    let full = reports.last().cloned().ok_or_else(|| Error::Bench("no inference rows".into()))?;
    let tag = format!("infer/{}", net.config().label());
    let k = b.skip;
    let skip = row(
        format!("{tag}/skip{k}"),
        &full.label,
        measure_inference(net, &stream, k, Scoring::Pipeline, b, cfg.seed)?,
        Some(&full),
    );
    let serial = row(
        format!("{tag}/skip{k}-serial"),
        &skip.label,
        measure_inference(net, &stream, k, Scoring::Serial, b, cfg.seed)?,
        Some(&skip),
    );
    let lazy = row(
        format!("{tag}/skip{k}-lazy"),
        &serial.label,
        measure_inference(net, &stream, k, Scoring::Lazy { fraction: b.active_fraction }, b, cfg.seed)?,
        Some(&serial),
    );
    reports.extend([skip, serial, lazy]);

    let meta = BenchMeta {
        precision: T::NAME,
        compute_threads: 1,
        pipeline_threads: 2,
        available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        repetitions: b.repetitions,
        warmup: b.warmup,
        frames: b.frames,
        train_batch: b.train_batch,
        timer_resolution_ns: timer_resolution().as_nanos() as u64,
    };
    Ok((reports, meta))
}

pub fn reports_csv(reports: &[BenchReport]) -> String {
    let mut text = format!("{BENCH_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            text,
            "{},{:.3},{:.6},{},{:.2}",
            r.label, r.fps, r.ms_per_batch, r.multiplies, r.speedup_pct
        );
    }
    text
}

/// Runs the grid and writes the CSV report and run metadata.
pub fn cmd_bench<T: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<BenchReport>> {
    let (reports, meta) = run_bench::<T>(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let csv = out_dir.join(BENCH_FILE);
    fs::write(&csv, reports_csv(&reports)).map_err(|e| Error::file(&csv, e))?;
    let meta_path = out_dir.join(BENCH_META_FILE);
    let text = toml::to_string(&meta).map_err(Error::config)?;
    fs::write(&meta_path, text).map_err(|e| Error::file(&meta_path, e))?;
    Ok(reports)
}
