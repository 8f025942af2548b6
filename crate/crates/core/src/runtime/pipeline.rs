use std::sync::mpsc::sync_channel;
use std::thread;

use crate::error::{Error, Result};
use crate::model::Network;
use crate::runtime::active::ActiveSet;
use crate::runtime::frames::FrameStream;
use crate::runtime::lazy::LazyOutput;
use crate::runtime::skip::SkipSchedule;
use crate::tensor::Scalar;

/// Scores for one frame. Skipped frames carry a copy of their source frame's scores.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores<T> {
    pub frame: usize,
    pub scores: Vec<(usize, T)>,
}

/// Work counters of one scoring run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScoringCounters {
    pub frames: usize,
    pub scored_frames: usize,
    /// Multiplies of everything before the output layer.
    pub hidden_multiplies: u64,
    pub output_multiplies: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringRun<T> {
    pub frames: Vec<FrameScores<T>>,
    pub counters: ScoringCounters,
}

fn pipeline_error(frame: usize, e: Error) -> Error {
    match e {
        Error::Pipeline { .. } => e,
        other => Error::Pipeline {
            frame,
            message: other.to_string(),
        },
    }
}

fn joined<R>(r: thread::Result<Result<R>>, who: &str) -> Result<R> {
    r.unwrap_or_else(|_| {
        Err(Error::Pipeline {
            frame: 0,
            message: format!("{who} worker panicked"),
        })
    })
}

fn hidden_for<T: Scalar>(net: &Network<T>, stream: &FrameStream<T>, t: usize) -> Result<Vec<T>> {
    let x = stream.stack_batch(&[t])?;
    Ok(net.hidden_forward(&net.shape_input(x)?)?.into_data())
}

fn finish<T: Scalar>(
    net: &Network<T>,
    schedule: &SkipSchedule,
    computed: Vec<Vec<(usize, T)>>,
    output_multiplies: u64,
) -> Result<ScoringRun<T>> {
    let scored = computed.len();
    let frames = schedule
        .expand(&computed)?
        .into_iter()
        .enumerate()
        .map(|(frame, scores)| FrameScores { frame, scores })
        .collect();
    Ok(ScoringRun {
        frames,
        counters: ScoringCounters {
            frames: schedule.total(),
            scored_frames: scored,
            hidden_multiplies: net.ops().hidden_multiplies() * scored as u64,
            output_multiplies,
        },
    })
}

fn check_lengths<T: Scalar>(stream: &FrameStream<T>, schedule: &SkipSchedule) -> Result<()> {
    if stream.len() != schedule.total() {
        return Err(Error::dim("skip schedule", &[schedule.total()], &[stream.len()]));
    }
    Ok(())
}

/// Two-thread scoring: a front worker computes hidden vectors of the
/// scheduled frames and hands them through a bounded queue to a back worker
/// that evaluates the requested outputs.
pub fn pipeline_run<T, F>(
    net: &Network<T>,
    stream: &FrameStream<T>,
    schedule: &SkipSchedule,
    mut active_fn: F,
    capacity: usize,
) -> Result<ScoringRun<T>>
where
    T: Scalar,
    F: FnMut(usize) -> Result<ActiveSet> + Send,
{
    check_lengths(stream, schedule)?;
    let computed = schedule.computed();
    let (tx, rx) = sync_channel::<(usize, Vec<T>)>(capacity);
    let mut lazy = LazyOutput::new(net.output_layer());

    let (front, back) = thread::scope(|s| {
        let front = s.spawn(|| -> Result<()> {
            for &t in &computed {
                let h = hidden_for(net, stream, t).map_err(|e| pipeline_error(t, e))?;
                if tx.send((t, h)).is_err() {
                    // the back worker stopped early and reports why
                    break;
                }
            }
            drop(tx);
            Ok(())
        });
        let back = s.spawn(|| -> Result<Vec<Vec<(usize, T)>>> {
            let mut out = Vec::with_capacity(computed.len());
            for (t, h) in rx {
                let active = active_fn(t).map_err(|e| pipeline_error(t, e))?;
                out.push(lazy.score(&h, &active).map_err(|e| pipeline_error(t, e))?);
            }
            Ok(out)
        });
        (joined(front.join(), "front"), joined(back.join(), "back"))
    });
    front?;
    let scores = back?;
    if scores.len() != computed.len() {
        return Err(Error::Pipeline {
            frame: computed.get(scores.len()).copied().unwrap_or(0),
            message: "stream ended early".into(),
        });
    }
    finish(net, schedule, scores, lazy.multiplies())
}

/// Single-threaded composition of the same steps, for comparison.
pub fn reference_run<T, F>(
    net: &Network<T>,
    stream: &FrameStream<T>,
    schedule: &SkipSchedule,
    mut active_fn: F,
) -> Result<ScoringRun<T>>
where
    T: Scalar,
    F: FnMut(usize) -> Result<ActiveSet>,
{
    check_lengths(stream, schedule)?;
    let mut lazy = LazyOutput::new(net.output_layer());
    let mut scores = Vec::with_capacity(schedule.computed_count());
    for t in schedule.computed() {
        let h = hidden_for(net, stream, t)?;
        scores.push(lazy.score(&h, &active_fn(t)?)?);
    }
    finish(net, schedule, scores, lazy.multiplies())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::model::{ModelConfig, FEATURE_DIM};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(frames: usize, seed: u64) -> (Network<f32>, FrameStream<f32>) {
        let cfg = ModelConfig::dnn(3, 32, Activation::Selu, 50);
        let net = Network::build(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream = FrameStream::new(Tensor::from_fn(&[frames, FEATURE_DIM], |_| rng.random_range(-1.0..1.0))).unwrap();
        (net, stream)
    }

    #[test]
    fn single_frame_all_units_is_full_forward() {
        let (net, stream) = setup(1, 1);
        let sched = SkipSchedule::new(1, 1).unwrap();
        let run = pipeline_run(&net, &stream, &sched, |_| Ok(ActiveSet::all(50)), 1).unwrap();
        let full = net.forward(&stream.stack_batch(&[0]).unwrap()).unwrap();
        let got: Vec<f32> = run.frames[0].scores.iter().map(|s| s.1).collect();
        assert_eq!(got, full.data());
    }

    #[test]
    fn matches_reference_for_every_capacity() {
        let (net, stream) = setup(100, 2);
        let sched = SkipSchedule::new(100, 3).unwrap();
        let pick = |t: usize| ActiveSet::fraction(50, 0.2, t as u64);
        let reference = reference_run(&net, &stream, &sched, pick).unwrap();
        for cap in [1, 4, 64] {
            assert_eq!(pipeline_run(&net, &stream, &sched, pick, cap).unwrap(), reference);
        }
        assert_eq!(reference.frames.len(), 100);
        assert_eq!(reference.counters.scored_frames, 34);
        assert_eq!(reference.counters.output_multiplies, 34 * 10 * 32);
    }

    #[test]
    fn active_failure_reports_frame() {
        let (net, stream) = setup(10, 3);
        let sched = SkipSchedule::new(10, 2).unwrap();
        let err = pipeline_run(&net, &stream, &sched, |t| ActiveSet::new(vec![if t == 4 { 99 } else { 0 }], 50), 1)
            .unwrap_err();
        assert!(matches!(err, Error::Pipeline { frame: 4, .. }), "{err}");
    }

    #[test]
    fn schedule_length_must_match_stream() {
        let (net, stream) = setup(5, 4);
        let sched = SkipSchedule::new(6, 1).unwrap();
        assert!(pipeline_run(&net, &stream, &sched, |_| Ok(ActiveSet::all(50)), 2).is_err());
    }
}
