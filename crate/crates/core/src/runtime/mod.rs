//! Low-latency scoring: context stacking, frame skipping and lazy output evaluation
//! split across a front and a back worker.

mod active;
mod frames;
pub mod io;
mod lazy;
mod pipeline;
mod skip;

pub use active::{ActiveSet, ActiveSource};
pub use frames::{FrameStream, CONTEXT_SIDE};
pub use lazy::LazyOutput;
pub use pipeline::{pipeline_run, reference_run, FrameScores, ScoringCounters, ScoringRun};
pub use skip::{SkipSchedule, DEFAULT_SKIP};
