//! One-vs-rest L2-regularized squared-hinge linear classifiers.
//!
//! Each binary problem minimizes `½‖w̃‖² + C·Σ max(0, 1 − yᵢ·w̃·x̃ᵢ)²` with
//! `x̃ = [x, 1]`, so the bias is regularized along with the weights. The
//! objective is piecewise quadratic; generalized Newton steps with a
//! backtracking line search reach the optimum in a handful of iterations.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metric;
use crate::pool::MetricKind;
use crate::seed::stream;

/// Newton stops once the gradient's max-norm falls below this fraction of
/// its initial value.
pub const SVM_TOLERANCE: f64 = 1e-8;
const MAX_NEWTON_STEPS: usize = 200;
const MAX_HALVINGS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c_grid: Vec<f64>,
    pub folds: usize,
}

impl Default for SvmConfig {
    /// `C ∈ {1e-10, 1e-9, …, 1e-1, 1}` with 5 grouped folds.
    fn default() -> Self {
        SvmConfig {
            c_grid: (-10..=0).map(|e| 10f64.powi(e)).collect(),
            folds: 5,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::InvalidConfig("SVM C grid is empty".into()));
        }
        if self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidConfig("SVM C values must be positive".into()));
        }
        if self.c_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("SVM C grid must be strictly increasing".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }
}

/// `scores = W·z + b`, one row of `W` per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub classes: usize,
    pub features: usize,
    /// Row-major `classes × features`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LinearClassifier {
    /// Row-major `n × classes` decision values. A binary classifier stores
    /// the negated class-1 scorer as class 0, so column 1 is its real score.
    pub fn decision_function(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.features;
        let mut out = Vec::with_capacity(n * self.classes);
        for row in x.chunks_exact(self.features) {
            for k in 0..self.classes {
                let w = &self.weights[k * self.features..(k + 1) * self.features];
                out.push(w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + self.biases[k]);
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        self.decision_function(x)
            .chunks_exact(self.classes)
            .map(metric::argmax)
            .collect()
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }
}

fn check_inputs(x: &[f64], features: usize, labels: &[usize], classes: usize) -> Result<usize> {
    if features == 0 || x.len() != labels.len() * features {
        return Err(Error::InvalidArgument(format!(
            "{} feature values for {} samples of dimension {features}",
            x.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SVM features".into()));
    }
    let first = labels.first().copied().unwrap_or(0);
    if labels.iter().all(|&l| l == first) {
        return Err(Error::SingleClass(first));
    }
    Ok(labels.len())
}

/// Design matrix with a trailing column of ones.
fn augmented(x: &[f64], n: usize, features: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, features + 1, |i, j| if j < features { x[i * features + j] } else { 1.0 })
}

fn objective(xa: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, c: f64) -> f64 {
    let margins = xa * w;
    let hinge: f64 = margins
        .iter()
        .zip(y.iter())
        .map(|(m, yi)| (1.0 - yi * m).max(0.0).powi(2))
        .sum();
    0.5 * w.norm_squared() + c * hinge
}

/// Minimizes the binary squared-hinge objective for labels `y ∈ {−1, +1}`.
fn solve_binary(xa: &DMatrix<f64>, y: &DVector<f64>, c: f64) -> Result<DVector<f64>> {
    let (n, d) = xa.shape();
    let mut w = DVector::zeros(d);
    let mut initial_grad = None;
    for _ in 0..MAX_NEWTON_STEPS {
        let margins = xa * &w;
        let active: Vec<usize> = (0..n).filter(|&i| y[i] * margins[i] < 1.0).collect();
        let mut grad = w.clone();
        for &i in &active {
            let r = 2.0 * c * (margins[i] - y[i]);
            grad.axpy(r, &xa.row(i).transpose(), 1.0);
        }
        let gnorm = grad.amax();
        let g0 = *initial_grad.get_or_insert(gnorm.max(1.0));
        if gnorm <= SVM_TOLERANCE * g0 {
            return Ok(w);
        }
        let x_act = xa.select_rows(&active);
        let mut hess = x_act.tr_mul(&x_act) * (2.0 * c);
        for j in 0..d {
            hess[(j, j)] += 1.0;
        }
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::NonFinite("SVM Hessian is not positive definite".into()))?;
        let step = -chol.solve(&grad);
        let slope = grad.dot(&step);
        let f0 = objective(xa, y, &w, c);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &w + &step * t;
            if objective(xa, y, &cand, c) <= f0 + 1e-4 * t * slope {
                w = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable decrease left: we are at the optimum to
            // machine precision.
            return Ok(w);
        }
    }
    Ok(w)
}

/// Fits one-vs-rest squared-hinge classifiers; binary tasks get a single
/// scorer for class 1.
pub fn fit_linear_svm(x: &[f64], features: usize, labels: &[usize], classes: usize, c: f64) -> Result<LinearClassifier> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    let n = check_inputs(x, features, labels, classes)?;
    let xa = augmented(x, n, features);
    let solve_for = |positive: usize| {
        let y = DVector::from_iterator(n, labels.iter().map(|&l| if l == positive { 1.0 } else { -1.0 }));
        solve_binary(&xa, &y, c)
    };
    let mut weights = Vec::with_capacity(classes * features);
    let mut biases = Vec::with_capacity(classes);
    if classes == 2 {
        let w = solve_for(1)?;
        weights.extend(w.iter().take(features).map(|v| -v));
        weights.extend(w.iter().take(features));
        biases.push(-w[features]);
        biases.push(w[features]);
    } else {
        for k in 0..classes {
            let w = solve_for(k)?;
            weights.extend(w.iter().take(features));
            biases.push(w[features]);
        }
    }
    let model = LinearClassifier {
        classes,
        features,
        weights,
        biases,
    };
    if !model.is_finite() {
        return Err(Error::NonFinite("SVM weights".into()));
    }
    Ok(model)
}

/// Fold index per sample. Distinct groups are shuffled and dealt round-robin,
/// so a group never straddles folds and every fold is non-empty.
pub fn grouped_folds(groups: &[u32], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let mut distinct: Vec<u32> = groups.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < folds {
        return Err(Error::InsufficientGroups {
            groups: distinct.len(),
            folds,
        });
    }
    distinct.shuffle(&mut stream(seed, "svm/folds"));
    let fold_of: std::collections::HashMap<u32, usize> =
        distinct.iter().enumerate().map(|(p, &g)| (g, p % folds)).collect();
    Ok(groups.iter().map(|g| fold_of[g]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmTuning {
    pub best_c: f64,
    /// Mean validation metric per grid value, `None` when no fold was usable.
    pub cv_scores: Vec<(f64, Option<f64>)>,
    pub model: LinearClassifier,
}

fn cv_score(
    x: &[f64],
    features: usize,
    labels: &[usize],
    classes: usize,
    kind: MetricKind,
    fold_of: &[usize],
    folds: usize,
    c: f64,
) -> Result<Option<f64>> {
    let mut scores = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (mut xt, mut yt, mut xv, mut yv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, &f) in fold_of.iter().enumerate() {
            let row = &x[i * features..(i + 1) * features];
            if f == fold {
                xv.extend_from_slice(row);
                yv.push(labels[i]);
            } else {
                xt.extend_from_slice(row);
                yt.push(labels[i]);
            }
        }
        let model = match fit_linear_svm(&xt, features, &yt, classes, c) {
            Ok(m) => m,
            Err(Error::SingleClass(_)) => continue,
            Err(e) => return Err(e),
        };
        match metric::metric(&model.decision_function(&xv), classes, &yv, kind) {
            Ok(s) => scores.push(s),
            Err(Error::SingleClass(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Grouped k-fold selection of `C` by the task metric (ties → smaller `C`),
/// then a refit on all samples.
#[allow(clippy::too_many_arguments)]
pub fn tune_svm(
    x: &[f64],
    features: usize,
    labels: &[usize],
    classes: usize,
    groups: &[u32],
    kind: MetricKind,
    config: &SvmConfig,
    seed: u64,
) -> Result<SvmTuning> {
    config.validate()?;
    check_inputs(x, features, labels, classes)?;
    if groups.len() != labels.len() {
        return Err(Error::InvalidArgument("one group per sample required".into()));
    }
    let fold_of = grouped_folds(groups, config.folds, seed)?;
    let results: Vec<Result<Option<f64>>> = config
        .c_grid
        .par_iter()
        .map(|&c| cv_score(x, features, labels, classes, kind, &fold_of, config.folds, c))
        .collect();
    let mut cv_scores = Vec::with_capacity(config.c_grid.len());
    let mut best: Option<(f64, f64)> = None;
    for (&c, r) in config.c_grid.iter().zip(results) {
        let s = r?;
        if let Some(s) = s {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        cv_scores.push((c, s));
    }
    let (best_c, _) = best.ok_or_else(|| Error::SingleClass(labels[0]))?;
    let model = fit_linear_svm(x, features, labels, classes, best_c)?;
    Ok(SvmTuning {
        best_c,
        cv_scores,
        model,
    })
}
