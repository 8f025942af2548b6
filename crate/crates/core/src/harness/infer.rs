//! Scoring a feature file with a checkpoint, and bound checks over a stats CSV.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::runtime::io::{read_features, write_scores};
use crate::runtime::{pipeline_run, reference_run, ActiveSource, ScoringRun, SkipSchedule};
use crate::stats::{check_bounds, import_csv, BoundsReport};
use crate::tensor::Scalar;

/// Which outputs the simulated decoder requests per frame.
#[derive(Clone, Debug, PartialEq)]
pub enum ActiveMode {
    All,
    /// Seeded draw of this fraction of outputs per frame.
    Fraction(f64),
    /// One whitespace-separated list of output indices per line.
    File(PathBuf),
}

impl ActiveMode {
    /// `all`, a number in `(0, 1]`, or a path.
    pub fn parse(text: &str) -> Self {
        if text == "all" {
            return ActiveMode::All;
        }
        match text.parse::<f64>() {
            Ok(p) => ActiveMode::Fraction(p),
            Err(_) => ActiveMode::File(PathBuf::from(text)),
        }
    }

    pub fn source(&self, seed: u64) -> Result<ActiveSource> {
        match self {
            ActiveMode::All => Ok(ActiveSource::All),
            ActiveMode::Fraction(p) => Ok(ActiveSource::Fraction { p: *p, seed }),
            ActiveMode::File(path) => {
                ActiveSource::parse_lists(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOptions {
    pub skip: usize,
    pub active: ActiveMode,
    /// Single-threaded scoring instead of the two-stage pipeline.
    pub reference: bool,
    pub capacity: usize,
    pub seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            skip: 1,
            active: ActiveMode::All,
            reference: false,
            capacity: 4,
            seed: 0,
        }
    }
}

/// Scores every frame of `features` and writes the score dump to `dump`.
pub fn cmd_infer<T: Scalar>(model: &Path, features: &Path, opts: &InferOptions, dump: &Path) -> Result<ScoringRun<T>> {
    let net = checkpoint::load::<T>(model)?;
    let stream = read_features::<T>(features)?;
    let schedule = SkipSchedule::new(stream.len(), opts.skip)?;
    let source = opts.active.source(opts.seed)?;
    let bound = net.config().output_dim;
    let active = |t: usize| source.for_frame(t, bound);
    let run = if opts.reference {
        reference_run(&net, &stream, &schedule, active)?
    } else {
        pipeline_run(&net, &stream, &schedule, active, opts.capacity)?
    };
    if let Some(dir) = dump.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let file = fs::File::create(dump).map_err(|e| Error::file(dump, e))?;
    write_scores(&run.frames, BufWriter::new(file))?;
    Ok(run)
}

/// Checks the records of a stats CSV against per-layer bounds.
pub fn cmd_stats(csv: &Path, layers: RangeInclusive<usize>, mean_bound: f64, var_bound: f64) -> Result<BoundsReport> {
    let file = fs::File::open(csv).map_err(|e| Error::file(csv, e))?;
    let records = import_csv(BufReader::new(file))?;
    check_bounds(&records, layers, mean_bound, var_bound)
}
