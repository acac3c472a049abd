use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{MetricKind, TaskId};

/// Scores keyed by `(combo id, left-out task, seed)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub entries: BTreeMap<(String, TaskId, u64), f64>,
    pub metric_kinds: BTreeMap<TaskId, MetricKind>,
    /// Runs that failed, with their error message. Not fatal for the table.
    pub failures: Vec<RunFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub combo: String,
    pub tasks: Vec<TaskId>,
    pub seed: u64,
    pub message: String,
}

impl ScoreTable {
    pub fn insert(&mut self, combo: &str, task: TaskId, seed: u64, kind: MetricKind, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score of {combo} on task {task}, seed {seed}")));
        }
        self.metric_kinds.insert(task, kind);
        self.entries.insert((combo.to_string(), task, seed), score);
        Ok(())
    }

    pub fn get(&self, combo: &str, task: TaskId, seed: u64) -> Option<f64> {
        self.entries.get(&(combo.to_string(), task, seed)).copied()
    }

    pub fn combos(&self) -> BTreeSet<String> {
        self.entries.keys().map(|(c, _, _)| c.clone()).collect()
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.entries.keys().map(|(_, t, _)| *t).collect()
    }

    pub fn seeds(&self) -> BTreeSet<u64> {
        self.entries.keys().map(|(_, _, s)| *s).collect()
    }

    /// Mean over seeds of one cell, `None` if the cell is empty.
    pub fn cell_mean(&self, combo: &str, task: TaskId) -> Option<f64> {
        let values: Vec<f64> = self
            .entries
            .range((combo.to_string(), task, 0)..=(combo.to_string(), task, u64::MAX))
            .map(|(_, &v)| v)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Ranks of every combination on every left-out task, rank 1 best.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    /// Sorted combo ids, one per row.
    pub combos: Vec<String>,
    /// Sorted task ids, one per column.
    pub tasks: Vec<TaskId>,
    /// `ranks[i][j]` is the rank of combo `i` on task `j`.
    pub ranks: Vec<Vec<f64>>,
}

impl RankMatrix {
    pub fn column(&self, task: TaskId) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("combo");
        for t in &self.tasks {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        for (combo, row) in self.combos.iter().zip(&self.ranks) {
            out.push_str(&format!("\"{combo}\""));
            for r in row {
                out.push_str(&format!(",{r}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Fractional ranks of `values`, descending (largest → 1); tied values share
/// the mean of the positions they occupy.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j share their mean.
        let shared = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = shared;
        }
        i = j;
    }
    ranks
}

/// Averages each cell over seeds and ranks combinations per task. Every
/// `(combo, task)` cell must hold the same seed set.
pub fn rank_matrix(table: &ScoreTable) -> Result<RankMatrix> {
    let combos: Vec<String> = table.combos().into_iter().collect();
    let tasks: Vec<TaskId> = table.tasks().into_iter().collect();
    let seeds = table.seeds();
    if combos.is_empty() {
        return Err(Error::InvalidArgument("empty score table".into()));
    }
    let mut missing = Vec::new();
    for c in &combos {
        for &t in &tasks {
            for &s in &seeds {
                if table.get(c, t, s).is_none() {
                    missing.push(format!("combo {c}, task {t}, seed {s}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    let mut ranks = vec![vec![0.0; tasks.len()]; combos.len()];
    for (j, &t) in tasks.iter().enumerate() {
        let means: Vec<f64> = combos
            .iter()
            .map(|c| table.cell_mean(c, t).expect("completeness checked"))
            .collect();
        for (i, r) in fractional_ranks(&means).into_iter().enumerate() {
            ranks[i][j] = r;
        }
    }
    Ok(RankMatrix { combos, tasks, ranks })
}

/// Mean rank of every combination over the included columns.
pub fn average_rank(rm: &RankMatrix, exclude: Option<TaskId>) -> Result<Vec<f64>> {
    let excluded = match exclude {
        Some(t) => {
            let col = rm
                .column(t)
                .ok_or_else(|| Error::UnknownTask(format!("task {t} is not a rank-matrix column")))?;
            if rm.tasks.len() < 2 {
                return Err(Error::InvalidArgument(
                    "excluding a task needs at least two rank-matrix columns".into(),
                ));
            }
            Some(col)
        }
        None => None,
    };
    let included = rm.tasks.len() - usize::from(excluded.is_some());
    if included == 0 {
        return Err(Error::InvalidArgument("rank matrix has no columns".into()));
    }
    Ok(rm
        .ranks
        .iter()
        .map(|row| {
            let sum: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != excluded)
                .map(|(_, r)| r)
                .sum();
            sum / included as f64
        })
        .collect())
}

/// Combination with the lowest average rank once `target`'s own column is
/// dropped; the lexicographically smallest id wins ties.
pub fn select_combo(rm: &RankMatrix, target: TaskId) -> Result<String> {
    let avg = if rm.combos.len() == 1 {
        vec![0.0]
    } else {
        average_rank(rm, Some(target))?
    };
    let mut best = 0;
    for i in 1..avg.len() {
        if avg[i] < avg[best] || (avg[i] == avg[best] && rm.combos[i] < rm.combos[best]) {
            best = i;
        }
    }
    Ok(rm.combos[best].clone())
}

/// Two means differ significantly when the gap exceeds twice the larger
/// standard deviation.
pub fn significant(mean_a: f64, std_a: f64, mean_b: f64, std_b: f64) -> bool {
    (mean_a - mean_b).abs() > 2.0 * std_a.max(std_b)
}

/// Mean and sample standard deviation (`n − 1` denominator, 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(ranks: Vec<Vec<f64>>) -> RankMatrix {
        let combos = (0..ranks.len()).map(|i| format!("c{i}")).collect();
        let tasks = (0..ranks[0].len() as u32).map(TaskId).collect();
        RankMatrix { combos, tasks, ranks }
    }

    #[test]
    fn ranks_descending_with_ties() {
        assert_eq!(fractional_ranks(&[0.9, 0.7, 0.8]), vec![1.0, 3.0, 2.0]);
        assert_eq!(fractional_ranks(&[0.9, 0.9, 0.1]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn average_rank_symmetry_and_exclusion() {
        let rm = matrix(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert_eq!(average_rank(&rm, None).unwrap(), vec![1.5, 1.5]);
        assert_eq!(average_rank(&rm, Some(TaskId(1))).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hand_enumerated_winner() {
        // Excluding task 0: averages over tasks 1 and 2 are
        // c0: 3.5, c1: 2.0, c2: 2.0, c3: 2.5 → tie c1/c2 → c1.
        let rm = matrix(vec![
            vec![1.0, 4.0, 3.0],
            vec![4.0, 1.0, 3.0],
            vec![3.0, 3.0, 1.0],
            vec![2.0, 2.0, 3.0],
        ]);
        assert_eq!(select_combo(&rm, TaskId(0)).unwrap(), "c1");
        // Excluding task 2: c0 2.5, c1 2.5, c2 3.0, c3 2.0 → c3.
        assert_eq!(select_combo(&rm, TaskId(2)).unwrap(), "c3");
    }

    #[test]
    fn single_combo_is_selected() {
        let rm = matrix(vec![vec![1.0]]);
        assert_eq!(select_combo(&rm, TaskId(0)).unwrap(), "c0");
    }

    #[test]
    fn significance_rule() {
        assert!(significant(0.90, 0.01, 0.85, 0.02));
        assert!(!significant(0.8, 0.1, 0.8, 0.1));
        assert!(!significant(1.0, 0.25, 0.5, 0.0));
    }

    #[test]
    fn missing_cells_listed() {
        let mut t = ScoreTable::default();
        t.insert("a", TaskId(0), 1, MetricKind::Accuracy, 0.5).unwrap();
        t.insert("a", TaskId(0), 2, MetricKind::Accuracy, 0.6).unwrap();
        t.insert("b", TaskId(0), 1, MetricKind::Accuracy, 0.7).unwrap();
        match rank_matrix(&t) {
            Err(Error::MissingCells(cells)) => assert_eq!(cells, vec!["combo b, task 0, seed 2".to_string()]),
            other => panic!("expected missing cells, got {other:?}"),
        }
    }

    #[test]
    fn cell_mean_over_seeds() {
        let mut t = ScoreTable::default();
        t.insert("a", TaskId(0), 1, MetricKind::Accuracy, 0.5).unwrap();
        t.insert("a", TaskId(0), 9, MetricKind::Accuracy, 0.7).unwrap();
        t.insert("a", TaskId(1), 1, MetricKind::Accuracy, 0.1).unwrap();
        assert!((t.cell_mean("a", TaskId(0)).unwrap() - 0.6).abs() < 1e-15);
    }
}
