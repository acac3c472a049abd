//! Experiment plumbing: configuration, checkpoints, the results store,
//! reports and the end-to-end runner behind the `mtlw` binary.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod run;
pub mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{enumerate_grid, ExperimentConfig, GridSpec, PoolSource, Protocol};
pub use report::{emit_report, ReportFiles, DEFAULT_COMPARISONS};
pub use run::{materialize_pool, run_experiment, RunOptions, RunSummary};
pub use store::{read_records, ResultRecord, ResultStore};
