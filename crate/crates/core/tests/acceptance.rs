//! Acceptance suite: one PASS/FAIL line per criterion, criteria run one after
//! another so wall-clock measurements do not overlap.
//!
//! `cargo test --release -p sndcnn-core --test acceptance [-- ac2 ac6 ...]`

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sndcnn::harness::{self, bench, stack_window, Dataset, RunConfig, RunStatus};
use sndcnn::layers::{softmax_xent, Activation, InitScheme};
use sndcnn::model::{ModelConfig, Network, STACKED_DIM};
use sndcnn::runtime::{pipeline_run, reference_run, ActiveSet, ActiveSource, FrameStream, SkipSchedule};
use sndcnn::stats::{check_bounds, LayerStats, StatsRecorder, TapPoint};
use sndcnn::{Scalar, Tensor};

struct Verdict {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Verdict {
            pass,
            summary: summary.into(),
            details: Vec::new(),
        }
    }

    fn detail(mut self, lines: Vec<String>) -> Self {
        self.details = lines;
        self
    }
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    limit: Option<Duration>,
    run: fn() -> Verdict,
}

const CLASSES: usize = 8;
const SEEDS: u64 = 10;
const TRAIN_STEPS: usize = 2_000;
/// Mini-batch of the long training runs (see the runtime limits).
const TRAIN_BATCH: usize = 32;

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: "AC1", title: "gradient fidelity", limit: Some(Duration::from_secs(60)), run: ac1 },
        Criterion { id: "AC2", title: "self-normalization", limit: Some(Duration::from_secs(600)), run: ac2 },
        Criterion { id: "AC3", title: "near-output degradation", limit: None, run: ac3 },
        Criterion { id: "AC4", title: "trainability contrast", limit: Some(Duration::from_secs(900)), run: ac4 },
        Criterion { id: "AC5", title: "ablation parity", limit: None, run: ac5 },
        Criterion { id: "AC6", title: "compute reduction", limit: None, run: ac6 },
        Criterion { id: "AC7", title: "frame skipping", limit: None, run: ac7 },
        Criterion { id: "AC8", title: "lazy output", limit: None, run: ac8 },
        Criterion { id: "AC9", title: "reproducibility", limit: None, run: ac9 },
    ];
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_uppercase())
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.iter().any(|w| w == c.id)) {
        let start = Instant::now();
        let v = (c.run)();
        let took = start.elapsed();
        let in_time = c.limit.is_none_or(|l| took <= l);
        let pass = v.pass && in_time;
        let limit = c.limit.map_or(String::new(), |l| format!(", limit {} s", l.as_secs()));
        println!(
            "{} {} {}: {} [{:.1} s{limit}]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            v.summary,
            took.as_secs_f64()
        );
        for d in &v.details {
            println!("     {d}");
        }
        ran += 1;
        failed += usize::from(!pass);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ac1() -> Verdict {
    let mut worst_all: f64 = 0.0;
    let mut details = Vec::new();
    for (name, check) in common::GRADIENT_FAMILIES {
        let worst = (0..common::FD_INSTANCES as u64).map(check).fold(0.0, f64::max);
        worst_all = worst_all.max(worst);
        details.push(format!("{name}: worst relative error {worst:.2e} over {} instances", common::FD_INSTANCES));
    }
    Verdict::new(
        worst_all < common::FD_TOLERANCE,
        format!("worst relative error {worst_all:.2e} (tolerance {:.0e}, h = {:.0e}, 64-bit)", common::FD_TOLERANCE, common::FD_STEP),
    )
    .detail(details)
}

fn train_config(seed: u64, model: ModelConfig) -> RunConfig {
    let mut cfg = RunConfig::new(seed, model);
    cfg.data.seed = Some(1_000);
    cfg.data.classes = CLASSES;
    cfg.training.batch = TRAIN_BATCH;
    cfg.training.max_steps = TRAIN_STEPS;
    cfg.training.lr = 0.01;
    cfg.training.early_stop = false;
    cfg.training.stats_cadence = 0;
    cfg
}

/// Per-layer post-activation statistics of one forward pass.
fn layer_stats<T: Scalar>(net: &mut Network<T>, x: Tensor<T>) -> Vec<LayerStats> {
    let mut rec = StatsRecorder::new(1, TapPoint::Post);
    let x = net.shape_input(x).unwrap();
    net.forward_train_tapped(&x, &mut rec).unwrap();
    net.clear_caches();
    rec.into_records().unwrap()
}

/// Statistics of a trained network on 256 training frames.
fn trained_stats(net: &mut Network<f32>, data: &Dataset) -> Vec<LayerStats> {
    let n = data.train.len();
    let frames: Vec<usize> = (0..256).map(|i| i * n / 256).collect();
    let feats: Tensor<f32> = data.train.features.cast();
    let x = stack_window(&feats, &frames, sndcnn::model::CONTEXT_FRAMES).unwrap();
    layer_stats(net, x)
}

struct SelfNormRun {
    init_ok: bool,
    init_worst: (f64, f64),
    trained_ok: bool,
    trained_worst: (f64, f64),
    dev12: f64,
    dev_last: f64,
}

fn self_norm_runs() -> &'static [SelfNormRun] {
    static RUNS: std::sync::OnceLock<Vec<SelfNormRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let model = ModelConfig::dnn(24, 256, Activation::Selu, CLASSES);
        let data = Dataset::load(&train_config(0, model.clone())).unwrap();
        (0..SEEDS)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::<f64>::from_fn(&[256, STACKED_DIM], |_| rng.sample(StandardNormal));
                let mut fresh = Network::<f64>::build(&model, seed).unwrap();
                let init = layer_stats(&mut fresh, x);
                let first12: Vec<&LayerStats> = init.iter().filter(|r| r.layer <= 12).collect();
                let init_worst = first12
                    .iter()
                    .fold((0.0f64, 0.0f64), |(m, v), r| (m.max(r.mean.abs()), v.max((r.variance - 1.0).abs())));
                let init_ok = first12.len() == 12
                    && first12
                        .iter()
                        .all(|r| r.mean.abs() <= 0.1 && (0.8..=1.25).contains(&r.variance));

                let cfg = train_config(seed, model.clone());
                let mut out = harness::train::<f32>(&cfg, &data).unwrap();
                let stats = trained_stats(&mut out.network, &data);
                let report = check_bounds(&stats, 1..=23, 0.8, 9.0).unwrap();
                let trained_worst = report
                    .layers
                    .iter()
                    .fold((0.0f64, 0.0f64), |(m, v), l| (m.max(l.max_abs_mean), v.max(l.max_variance)));
                let dev = |layer| stats.iter().find(|r| r.layer == layer).unwrap().deviation();
                SelfNormRun {
                    init_ok,
                    init_worst,
                    trained_ok: report.all_pass() && report.layers.len() == 23,
                    trained_worst,
                    dev12: dev(12),
                    dev_last: dev(23),
                }
            })
            .collect()
    })
}

fn ac2() -> Verdict {
    let runs = self_norm_runs();
    let passing = runs.iter().filter(|r| r.init_ok && r.trained_ok).count();
    let details = runs
        .iter()
        .enumerate()
        .map(|(s, r)| {
            format!(
                "seed {s}: init layers 1-12 max |mean| {:.3}, max |var-1| {:.3}; after {TRAIN_STEPS} steps max |mean| {:.3}, max var {:.3}",
                r.init_worst.0, r.init_worst.1, r.trained_worst.0, r.trained_worst.1
            )
        })
        .collect();
    Verdict::new(
        passing == runs.len(),
        format!(
            "{passing}/{} seeds within bounds (init: |mean| <= 0.1, var in [0.8, 1.25]; trained: |mean| < 0.8, var < 9)",
            runs.len()
        ),
    )
    .detail(details)
}

fn ac3() -> Verdict {
    let runs = self_norm_runs();
    let worse = runs.iter().filter(|r| r.dev_last > r.dev12).count();
    let details = runs
        .iter()
        .enumerate()
        .map(|(s, r)| format!("seed {s}: deviation layer 12 {:.4}, layer 23 {:.4}", r.dev12, r.dev_last))
        .collect();
    Verdict::new(
        worse >= 8,
        format!("last hidden layer deviates more than layer 12 in {worse}/{} seeds (need >= 8)", runs.len()),
    )
    .detail(details)
}

fn ac4() -> Verdict {
    // the "not trainable" stack: plain RELU under the SELU initialization
    let relu = ModelConfig::dnn(30, 128, Activation::Relu, CLASSES).with_init(InitScheme::LecunNormal);
    let selu = ModelConfig::dnn(30, 128, Activation::Selu, CLASSES);
    let data = Dataset::load(&train_config(0, relu.clone())).unwrap();
    let feats: Tensor<f32> = data.train.features.cast();
    let mut details = Vec::new();
    let (mut vanishing, mut stalled, mut selu_ok) = (0, 0, 0);
    for seed in 0..SEEDS {
        // gradient norms at initialization on one training batch
        let mut net = Network::<f32>::build(&relu, seed).unwrap();
        let frames: Vec<usize> = (0..TRAIN_BATCH).map(|i| i * data.train.len() / TRAIN_BATCH).collect();
        let x = net.shape_input(stack_window(&feats, &frames, sndcnn::model::CONTEXT_FRAMES).unwrap()).unwrap();
        let labels: Vec<usize> = frames.iter().map(|&t| data.train.labels[t]).collect();
        let logits = net.forward_train(&x).unwrap();
        let (_, g) = softmax_xent(&logits, &labels).unwrap();
        let norms = net.backward(&g).unwrap().weight_inf_norms(&net);
        let g1 = norms.iter().find(|n| n.0 == 1).unwrap().1;
        let g30 = norms.iter().find(|n| n.0 == 30).unwrap().1;
        let ratio = g1 / g30;
        vanishing += usize::from(ratio < 1e-12);

        let r = harness::train::<f32>(&train_config(seed, relu.clone()), &data).unwrap();
        let failed = r.status == RunStatus::Diverged || r.improvement() < 0.05;
        stalled += usize::from(failed);
        let s = harness::train::<f32>(&train_config(seed, selu.clone()), &data).unwrap();
        selu_ok += usize::from(s.train_accuracy >= 0.90);
        details.push(format!(
            "seed {seed}: relu |g1|/|g30| = {ratio:.3e}; relu {:?}, loss improvement {:.3}; selu train accuracy {:.3}",
            r.status,
            r.improvement(),
            s.train_accuracy
        ));
    }
    let n = SEEDS as usize;
    Verdict::new(
        vanishing == n && stalled == n && selu_ok == n,
        format!(
            "relu gradient ratio < 1e-12 in {vanishing}/{n}; relu fails to improve 5% in {stalled}/{n}; selu >= 90% train accuracy in {selu_ok}/{n}"
        ),
    )
    .detail(details)
}

fn ac5() -> Verdict {
    const PAIR_SEEDS: u64 = 4;
    let scaled = |m: ModelConfig| m.with_widths(vec![8, 16, 32, 64]).with_input(11 * 40, Some([11, 40]));
    let snd = scaled(ModelConfig::sndcnn(24, CLASSES));
    let res = scaled(ModelConfig::resnet(24, CLASSES));
    let config = |seed, model| {
        let mut cfg = train_config(seed, model);
        cfg.data.frames = 100_000;
        cfg.data.holdout = 10_000;
        cfg.training.lr = 0.03;
        cfg.training.max_steps = 3_000;
        cfg
    };
    let data = Dataset::load(&config(0, snd.clone())).unwrap();
    let mut details = Vec::new();
    let (mut acc_snd, mut acc_res) = (0.0, 0.0);
    for seed in 0..PAIR_SEEDS {
        let a = harness::train::<f32>(&config(seed, snd.clone()), &data).unwrap().holdout_accuracy;
        let b = harness::train::<f32>(&config(seed, res.clone()), &data).unwrap().holdout_accuracy;
        details.push(format!("seed {seed}: sndcnn-24 {:.2}%, resnet-24 {:.2}%", 100.0 * a, 100.0 * b));
        acc_snd += a / PAIR_SEEDS as f64;
        acc_res += b / PAIR_SEEDS as f64;
    }
    let gap = 100.0 * (acc_snd - acc_res);
    Verdict::new(
        gap.abs() <= 1.0,
        format!(
            "held-out frame accuracy sndcnn-24 {:.2}% vs resnet-24 {:.2}% (gap {gap:+.2} points, mean of {PAIR_SEEDS} seeds, need within 1.0)",
            100.0 * acc_snd,
            100.0 * acc_res
        ),
    )
    .detail(details)
}

/// Inference benchmark workload shared by the wall-clock criteria.
fn bench_setup() -> (RunConfig, FrameStream<f32>) {
    let cfg = RunConfig::new(1, ModelConfig::sndcnn(50, 100));
    let stream = harness::gen_synthetic(7, cfg.bench.frames, 2).unwrap().stream().unwrap();
    (cfg, stream)
}

fn ac6() -> Verdict {
    let snd_cfg = ModelConfig::sndcnn(50, 100);
    let res_cfg = ModelConfig::resnet(50, 100);
    let snd = Network::<f32>::build(&snd_cfg, 1).unwrap();
    let res = Network::<f32>::build(&res_cfg, 1).unwrap();
    let (so, ro) = (snd.ops(), res.ops());
    let census_ok = so.multiplies() < ro.multiplies() && so.total_ops() < ro.total_ops();

    let (cfg, stream) = bench_setup();
    let time = |net: &Network<f32>| {
        bench::measure_inference(net, &stream, 1, bench::Scoring::Pipeline, &cfg.bench, 1).unwrap()
    };
    let r = time(&res);
    let s = time(&snd);
    let speedup = r.seconds / s.seconds - 1.0;
    Verdict::new(
        census_ok && speedup >= 0.30,
        format!(
            "multiplies per frame {} vs {} (ratio {:.4}); inference throughput gain {:+.1}% (floor +30%)",
            so.multiplies(),
            ro.multiplies(),
            so.multiplies() as f64 / ro.multiplies() as f64,
            100.0 * speedup
        ),
    )
    .detail(vec![
        format!("total ops per frame {} vs {}", so.total_ops(), ro.total_ops()),
        format!(
            "median over {} runs after {} warmup, {} frames, f32: resnet-50 {:.1} fps, sndcnn-50 {:.1} fps",
            cfg.bench.repetitions,
            cfg.bench.warmup,
            stream.len(),
            stream.len() as f64 / r.seconds,
            stream.len() as f64 / s.seconds
        ),
    ])
}

fn ac7() -> Verdict {
    let (cfg, stream) = bench_setup();
    let net = Network::<f32>::build(&cfg.model, 1).unwrap();
    let t = stream.len();
    let all = |_: usize| Ok(ActiveSet::all(100));
    let one = pipeline_run(&net, &stream, &SkipSchedule::new(t, 1).unwrap(), all, 4).unwrap();
    let three = pipeline_run(&net, &stream, &SkipSchedule::new(t, 3).unwrap(), all, 4).unwrap();
    let counts_ok = t % 3 == 0
        && three.counters.scored_frames == t / 3
        && three.counters.hidden_multiplies * 3 == one.counters.hidden_multiplies;
    let time = |k| bench::measure_inference(&net, &stream, k, bench::Scoring::Pipeline, &cfg.bench, 1).unwrap();
    let t1 = time(1);
    let t3 = time(3);
    let reduction = 1.0 - t3.seconds / t1.seconds;
    Verdict::new(
        counts_ok && reduction >= 0.40,
        format!(
            "scored {}/{t} frames, hidden multiplies {} vs {} (exactly 1/3: {}); wall-clock reduction {:.1}% (floor 40%)",
            three.counters.scored_frames,
            three.counters.hidden_multiplies,
            one.counters.hidden_multiplies,
            three.counters.hidden_multiplies * 3 == one.counters.hidden_multiplies,
            100.0 * reduction
        ),
    )
}

fn bits(run: &sndcnn::runtime::ScoringRun<f32>) -> Vec<(usize, Vec<(usize, u32)>)> {
    run.frames
        .iter()
        .map(|f| (f.frame, f.scores.iter().map(|&(j, s)| (j, s.to_bits())).collect()))
        .collect()
}

fn ac8() -> Verdict {
    // counter arithmetic on 10,000 outputs
    let wide = Network::<f32>::build(&ModelConfig::dnn(3, 64, Activation::Selu, 10_000), 3).unwrap();
    let stream: FrameStream<f32> = harness::gen_synthetic(3, 12, 2).unwrap().stream().unwrap();
    let schedule = SkipSchedule::new(stream.len(), 1).unwrap();
    let full = reference_run(&wide, &stream, &schedule, |_| Ok(ActiveSet::all(10_000))).unwrap();
    let lazy_src = ActiveSource::Fraction { p: 0.05, seed: 9 };
    let lazy = pipeline_run(&wide, &stream, &schedule, |t| lazy_src.for_frame(t, 10_000), 4).unwrap();
    let per_frame = lazy.counters.output_multiplies / stream.len() as u64;
    let counts_ok = lazy.counters.output_multiplies * 20 == full.counters.output_multiplies
        && per_frame == 500 * wide.hidden_dim() as u64;

    // pipeline against the single-threaded reference
    let net = Network::<f32>::build(&ModelConfig::dnn(3, 32, Activation::Selu, 200), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut identical = 0;
    let mut total = 0;
    for s in 0..100u64 {
        let frames = rng.random_range(1..60);
        let stream: FrameStream<f32> = harness::gen_synthetic(100 + s, frames, 2).unwrap().stream().unwrap();
        let schedule = SkipSchedule::new(frames, rng.random_range(1..=4)).unwrap();
        let src = ActiveSource::Fraction { p: rng.random_range(0.01..=1.0), seed: s };
        let reference = reference_run(&net, &stream, &schedule, |t| src.for_frame(t, 200)).unwrap();
        for capacity in [1, 4, 64] {
            let piped = pipeline_run(&net, &stream, &schedule, |t| src.for_frame(t, 200), capacity).unwrap();
            identical += usize::from(bits(&piped) == bits(&reference) && piped.counters == reference.counters);
            total += 1;
        }
    }
    Verdict::new(
        counts_ok && identical == total,
        format!(
            "output multiplies {} = 5% of {} ({} per frame = 500 x {}); {identical}/{total} pipeline runs bit-identical to the reference",
            lazy.counters.output_multiplies,
            full.counters.output_multiplies,
            per_frame,
            wide.hidden_dim()
        ),
    )
}

fn ac9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(21, ModelConfig::dnn(4, 64, Activation::Selu, CLASSES));
    cfg.data.frames = 4_000;
    cfg.data.holdout = 500;
    cfg.training.batch = 32;
    cfg.training.max_steps = 200;
    cfg.training.eval_every = 50;
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    harness::cmd_train::<f64>(&cfg, &a).unwrap();
    harness::cmd_train::<f64>(&cfg, &b).unwrap();
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let files = [
        harness::train::CHECKPOINT_FILE,
        harness::train::STATS_FILE,
        harness::train::LOG_FILE,
        harness::train::GRAD_NORMS_FILE,
    ];
    let matching: Vec<&str> = files.iter().copied().filter(|f| same(f)).collect();
    Verdict::new(
        matching.len() == files.len(),
        format!("{}/{} artifacts bit-identical across two 64-bit runs ({})", matching.len(), files.len(), matching.join(", ")),
    )
}
