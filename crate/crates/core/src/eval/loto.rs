use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rank::{RunFailure, ScoreTable};
use crate::error::{Error, Result};
use crate::pool::{MetricKind, PoolLayout, SplitKind, TaskId, TaskPool};
use crate::seed::derive_seed;
use crate::trainer::{train_mtl, HyperCombo, TrainSchedule, TrunkInit};
use crate::transfer::{transfer_feature_extraction, FeatureExtractionConfig};

/// Sets of tasks left out together; related tasks always share a set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveOutPlan {
    pub sets: Vec<Vec<TaskId>>,
}

impl LeaveOutPlan {
    /// Number of left-out evaluation tasks over all sets.
    pub fn t_out(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, layout: &impl PoolLayout) -> Result<()> {
        let ids: BTreeSet<TaskId> = layout.task_ids().into_iter().collect();
        for set in &self.sets {
            if set.is_empty() {
                return Err(Error::InvalidConfig("empty left-out set".into()));
            }
            if let Some(t) = set.iter().find(|t| !ids.contains(t)) {
                return Err(Error::UnknownTask(t.to_string()));
            }
            for group in layout.related_groups() {
                let inside = group.iter().filter(|t| set.contains(t)).count();
                if inside > 0 && inside < group.len() {
                    return Err(Error::InvalidConfig(format!(
                        "left-out set {set:?} splits the related group {group:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keeps only the sets containing at least one of `tasks`.
    pub fn restricted_to(&self, tasks: &BTreeSet<TaskId>) -> LeaveOutPlan {
        LeaveOutPlan {
            sets: self
                .sets
                .iter()
                .filter(|s| s.iter().any(|t| tasks.contains(t)))
                .cloned()
                .collect(),
        }
    }
}

/// Exhaustive plan: one set per related group, one singleton per other task,
/// in order of first appearance.
pub fn leave_out_sets(layout: &impl PoolLayout) -> LeaveOutPlan {
    let groups = layout.related_groups();
    let mut emitted = vec![false; groups.len()];
    let mut sets = Vec::new();
    for t in layout.task_ids() {
        match groups.iter().position(|g| g.contains(&t)) {
            Some(gi) if !emitted[gi] => {
                emitted[gi] = true;
                let mut g = groups[gi].clone();
                g.sort();
                sets.push(g);
            }
            Some(_) => {}
            None => sets.push(vec![t]),
        }
    }
    LeaveOutPlan { sets }
}

/// Training and transfer settings shared by every LOTO job. The seeds inside
/// are replaced by per-job derived seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotoSettings {
    pub schedule: TrainSchedule,
    pub feature_extraction: FeatureExtractionConfig,
}

/// One MTL training on the pool minus `tasks`, followed by transfer to each
/// of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotoJob {
    pub tasks: Vec<TaskId>,
    pub combo: HyperCombo,
    pub seed: u64,
}

impl LotoJob {
    pub fn set_key(&self) -> String {
        self.tasks.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join("+")
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, &format!("loto/{}/{}/{stage}", self.set_key(), self.combo.id()))
    }
}

/// Jobs in (set, combo, seed) order.
pub fn loto_jobs(plan: &LeaveOutPlan, grid: &[HyperCombo], seeds: &[u64]) -> Vec<LotoJob> {
    let mut jobs = Vec::with_capacity(plan.sets.len() * grid.len() * seeds.len());
    for set in &plan.sets {
        for combo in grid {
            for &seed in seeds {
                jobs.push(LotoJob {
                    tasks: set.clone(),
                    combo: combo.clone(),
                    seed,
                });
            }
        }
    }
    jobs
}

/// Trains on the pool without the job's tasks, then scores feature
/// extraction on each left-out task: SVM fitted on its training split,
/// scored on its validation split. Test splits are never read.
pub fn run_loto_job(pool: &TaskPool, job: &LotoJob, settings: &LotoSettings) -> Result<Vec<(TaskId, MetricKind, f64)>> {
    let excluded: BTreeSet<TaskId> = job.tasks.iter().copied().collect();
    let remaining = pool.without(&excluded);
    let schedule = TrainSchedule {
        seed: job.stage_seed("mtl"),
        ..settings.schedule.clone()
    };
    let (model, _) = train_mtl(&remaining, &job.combo, &schedule, &TrunkInit::Random)?;
    let fe = FeatureExtractionConfig {
        seed: job.stage_seed("fe"),
        ..settings.feature_extraction.clone()
    };
    job.tasks
        .iter()
        .map(|&t| {
            let task = pool.task(t)?;
            let r = transfer_feature_extraction(&model, task, &pool.norm, SplitKind::Train, SplitKind::Val, &fe)?;
            Ok((t, task.metric, r.score))
        })
        .collect()
}

/// Runs every (set, combo, seed) job in parallel and merges the scores in
/// job order. Failed jobs are recorded in the table, not propagated.
pub fn run_loto(
    pool: &TaskPool,
    grid: &[HyperCombo],
    plan: &LeaveOutPlan,
    seeds: &[u64],
    settings: &LotoSettings,
) -> Result<ScoreTable> {
    if grid.is_empty() || plan.sets.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("LOTO needs a non-empty grid, plan and seed list".into()));
    }
    plan.validate(pool)?;
    let jobs = loto_jobs(plan, grid, seeds);
    let results: Vec<Result<Vec<(TaskId, MetricKind, f64)>>> =
        jobs.par_iter().map(|job| run_loto_job(pool, job, settings)).collect();
    let mut table = ScoreTable::default();
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(scores) => {
                for (task, kind, score) in scores {
                    table.insert(&job.combo.id(), task, job.seed, kind, score)?;
                }
            }
            Err(e) => table.failures.push(RunFailure {
                combo: job.combo.id(),
                tasks: job.tasks.clone(),
                seed: job.seed,
                message: e.to_string(),
            }),
        }
    }
    Ok(table)
}
