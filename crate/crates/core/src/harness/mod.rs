//! End-to-end driver: data generation, training runs, benchmarks, scoring and bound checks.

pub mod bench;
pub mod config;
pub mod data;
pub mod infer;
pub mod train;

pub use bench::{cmd_bench, run_bench, topology_grid, BenchMeta, BenchReport, Scoring, BENCH_HEADER};
pub use config::{BenchConfig, DataConfig, OutputConfig, RunConfig, TrainingConfig};
pub use data::{gen_synthetic, stack_window, Corpus};
pub use infer::{cmd_infer, cmd_stats, ActiveMode, InferOptions};
pub use train::{cmd_train, train, train_from, Dataset, RunStatus, StepLog, TrainOutcome, TrainSummary};
