//! Metrics, leave-one-task-out cross-validation, rank aggregation,
//! target-excluded selection and the significance rule.

mod loto;
pub mod metric;
mod rank;

pub use loto::{leave_out_sets, loto_jobs, run_loto, run_loto_job, LeaveOutPlan, LotoJob, LotoSettings};
pub use metric::{accuracy, metric, roc_auc};
pub use rank::{
    average_rank, fractional_ranks, mean_std, rank_matrix, select_combo, significant, RankMatrix, RunFailure,
    ScoreTable,
};
