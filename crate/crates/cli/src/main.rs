use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sndcnn::harness::{self, ActiveMode, DataConfig, InferOptions, RunConfig};
use sndcnn::runtime::io::write_features;
use sndcnn::{Error, Result, Scalar};

/// Feature and label file names written by `gen`.
const FEATURES_FILE: &str = "features.fbnk";
const LABELS_FILE: &str = "labels.txt";
const SCORES_FILE: &str = "scores.bin";

#[derive(Parser, Debug)]
#[command(name = "sndcnn", version, about = "Train, benchmark and score self-normalizing acoustic models")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic feature file and its frame labels.
    Gen(GenArgs),
    /// Train the configured model; writes checkpoint, stats, logs and a summary.
    Train,
    /// Time training steps and inference over the topology grid.
    Bench,
    /// Check a stats CSV against per-layer mean and variance bounds.
    Stats(StatsArgs),
    /// Score a feature file with a checkpoint.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Frames to generate (default: `data.frames`).
    #[arg(long)]
    frames: Option<usize>,
    /// Number of classes (default: `data.classes`).
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Stats CSV (default: `<out>/stats.csv`).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Layers to check: `N`, `A-B` or `all`.
    #[arg(long, default_value = "all", value_parser = parse_layers)]
    layers: RangeInclusive<usize>,
    #[arg(long, default_value_t = 0.8)]
    mean_bound: f64,
    #[arg(long, default_value_t = 9.0)]
    var_bound: f64,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint to score with.
    #[arg(long)]
    model: PathBuf,
    /// Feature file (40-dim frames).
    #[arg(long)]
    features: PathBuf,
    /// Score every k-th frame and repeat its scores for the frames in between.
    #[arg(long, default_value_t = 1)]
    skip: usize,
    /// `all`, a fraction of outputs in (0, 1], or a file of per-frame index lists.
    #[arg(long, default_value = "all")]
    active: String,
    /// Single-threaded reference scoring instead of the pipeline.
    #[arg(long)]
    reference: bool,
    /// Pipeline queue capacity.
    #[arg(long, default_value_t = 4)]
    capacity: usize,
    /// Score dump (default: `<out>/scores.bin`).
    #[arg(long)]
    dump: Option<PathBuf>,
}

fn parse_layers(text: &str) -> std::result::Result<RangeInclusive<usize>, String> {
    if text == "all" {
        return Ok(1..=usize::MAX);
    }
    let num = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("bad layer '{s}': {e}"));
    let (lo, hi) = match text.split_once('-') {
        Some((a, b)) => (num(a)?, num(b)?),
        None => (num(text)?, num(text)?),
    };
    if lo == 0 || lo > hi {
        return Err(format!("layer range '{text}' must be 1-based and non-empty"));
    }
    Ok(lo..=hi)
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --config".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Output directory without requiring a config file.
    fn out_dir(&self) -> Result<PathBuf> {
        match (&self.out, &self.config) {
            (Some(out), _) => Ok(out.clone()),
            (None, Some(_)) => Ok(self.run_config()?.output.dir),
            (None, None) => Ok(PathBuf::from("out")),
        }
    }
}

fn gen(cli: &Cli, args: &GenArgs) -> Result<()> {
    let (mut data, seed) = match &cli.config {
        Some(_) => {
            let cfg = cli.run_config()?;
            (cfg.data.clone(), cli.seed.unwrap_or(cfg.data_seed()))
        }
        None => {
            let seed = cli
                .seed
                .ok_or_else(|| Error::Config("gen needs --seed or --config".into()))?;
            (DataConfig::default(), seed)
        }
    };
    data.frames = args.frames.unwrap_or(data.frames);
    data.classes = args.classes.unwrap_or(data.classes);
    let corpus = harness::gen_synthetic(seed, data.frames, data.classes)?;
    let dir = cli.out_dir()?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::File {
        path: dir.display().to_string(),
        source: e,
    })?;
    write_features(&corpus.stream::<f32>()?, &dir.join(FEATURES_FILE))?;
    harness::data::write_labels(&corpus.labels, &dir.join(LABELS_FILE))?;
    println!(
        "wrote {} frames, {} classes (seed {seed}) to {}",
        corpus.len(),
        corpus.classes,
        dir.display()
    );
    Ok(())
}

fn train<T: Scalar>(cli: &Cli) -> Result<ExitCode> {
    let cfg = cli.run_config()?;
    let s = harness::cmd_train::<T>(&cfg, &cfg.output.dir)?;
    println!(
        "{} [{}]: {:?} after {} steps, loss {} -> {}, improvement {:.3}, train accuracy {:.4}, holdout accuracy {:.4}",
        s.label,
        s.precision,
        s.status,
        s.steps,
        fmt_opt(s.first_loss),
        fmt_opt(s.final_loss),
        s.improvement,
        s.train_accuracy,
        s.holdout_accuracy
    );
    println!("checkpoint: {}", s.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn bench<T: Scalar>(cli: &Cli) -> Result<ExitCode> {
    let cfg = cli.run_config()?;
    let reports = harness::cmd_bench::<T>(&cfg, &cfg.output.dir)?;
    print!("{}", harness::bench::reports_csv(&reports));
    Ok(ExitCode::SUCCESS)
}

fn stats(cli: &Cli, args: &StatsArgs) -> Result<ExitCode> {
    let csv = match &args.csv {
        Some(p) => p.clone(),
        None => cli.out_dir()?.join(harness::train::STATS_FILE),
    };
    let report = harness::cmd_stats(&csv, args.layers.clone(), args.mean_bound, args.var_bound)?;
    println!("layer,max_abs_mean,max_variance,records,pass");
    for l in &report.layers {
        println!("{},{:.6},{:.6},{},{}", l.layer, l.max_abs_mean, l.max_variance, l.records, l.pass);
    }
    let failing = report.failing().count();
    println!(
        "{} of {} layers within |mean| < {} and variance < {}",
        report.layers.len() - failing,
        report.layers.len(),
        report.mean_bound,
        report.var_bound
    );
    Ok(if report.all_pass() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn infer<T: Scalar>(cli: &Cli, args: &InferArgs) -> Result<ExitCode> {
    let opts = InferOptions {
        skip: args.skip,
        active: ActiveMode::parse(&args.active),
        reference: args.reference,
        capacity: args.capacity,
        seed: cli.seed.unwrap_or(0),
    };
    let dump = match &args.dump {
        Some(p) => p.clone(),
        None => cli.out_dir()?.join(SCORES_FILE),
    };
    let run = harness::cmd_infer::<T>(&args.model, &args.features, &opts, &dump)?;
    let c = run.counters;
    println!(
        "frames {}, scored {}, hidden multiplies {}, output multiplies {}",
        c.frames, c.scored_frames, c.hidden_multiplies, c.output_multiplies
    );
    println!("scores: {}", dump.display());
    Ok(ExitCode::SUCCESS)
}

fn dispatch<T: Scalar>(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Gen(args) => gen(cli, args).map(|_| ExitCode::SUCCESS),
        Command::Train => train::<T>(cli),
        Command::Bench => bench::<T>(cli),
        Command::Stats(args) => stats(cli, args),
        Command::Infer(args) => infer::<T>(cli, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.precision {
        Precision::F32 => dispatch::<f32>(&cli),
        Precision::F64 => dispatch::<f64>(&cli),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
