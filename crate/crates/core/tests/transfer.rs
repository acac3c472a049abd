use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mtl_workbench::eval::mean_std;
use mtl_workbench::model::MtlModel;
use mtl_workbench::nn::TrunkConfig;
use mtl_workbench::pool::{grouped_split, MetricKind, NormStats, SplitKind, Task, TaskId};
use mtl_workbench::transfer::{fit_linear_svm, transfer_feature_extraction, FeatureExtractionConfig, SvmConfig};

const CENTERS: [(f64, f64); 3] = [(0.0, 0.0), (2.5, 0.5), (0.5, 2.5)];

fn blobs(n_per_class: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let noise = Normal::new(0.0, 0.9).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n_per_class {
        for (k, &(cx, cy)) in CENTERS.iter().enumerate() {
            x.push(cx + noise.sample(rng));
            x.push(cy + noise.sample(rng));
            y.push(k);
        }
    }
    (x, y)
}

fn accuracy_of(pred: impl Iterator<Item = usize>, y: &[usize]) -> f64 {
    pred.zip(y).filter(|(p, t)| p == *t).count() as f64 / y.len() as f64
}

/// Exhaustive search over linear scorers on a coarse grid. Class 0 scores 0
/// (argmax is unchanged by subtracting one class's scorer from all), classes
/// 1 and 2 each get `w1·x + w2·y + b` with every coefficient in -3..=3 by 0.5.
/// Returns the grid point with the best training accuracy.
fn brute_force(x: &[f64], y: &[usize]) -> [[f64; 3]; 2] {
    let steps: Vec<f64> = (-6..=6).map(|i| f64::from(i) * 0.5).collect();
    let mut grid = Vec::new();
    for &a in &steps {
        for &b in &steps {
            for &c in &steps {
                grid.push([a, b, c]);
            }
        }
    }
    let n = y.len();
    let scores: Vec<Vec<f64>> = grid
        .iter()
        .map(|w| (0..n).map(|i| w[0] * x[2 * i] + w[1] * x[2 * i + 1] + w[2]).collect())
        .collect();
    let mut best = (0usize, [0usize, 0usize]);
    for (i, s1) in scores.iter().enumerate() {
        for (j, s2) in scores.iter().enumerate() {
            let mut correct = 0;
            for p in 0..n {
                let pred = if s1[p] > 0.0 && s1[p] >= s2[p] {
                    1
                } else if s2[p] > 0.0 && s2[p] > s1[p] {
                    2
                } else {
                    0
                };
                correct += usize::from(pred == y[p]);
            }
            if correct > best.0 {
                best = (correct, [i, j]);
            }
        }
    }
    [grid[best.1[0]], grid[best.1[1]]]
}

fn brute_predict(w: &[[f64; 3]; 2], x: &[f64]) -> Vec<usize> {
    x.chunks_exact(2)
        .map(|p| {
            let s1 = w[0][0] * p[0] + w[0][1] * p[1] + w[0][2];
            let s2 = w[1][0] * p[0] + w[1][1] * p[1] + w[1][2];
            if s1 > 0.0 && s1 >= s2 {
                1
            } else if s2 > 0.0 && s2 > s1 {
                2
            } else {
                0
            }
        })
        .collect()
}

#[test]
fn svm_on_blobs_matches_exhaustive_linear_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (x_train, y_train) = blobs(50, &mut rng);
    let (x_test, y_test) = blobs(1000, &mut rng);

    let svm = fit_linear_svm(&x_train, 2, &y_train, 3, 1.0).unwrap();
    let svm_acc = accuracy_of(svm.predict(&x_test).into_iter(), &y_test);

    let w = brute_force(&x_train, &y_train);
    let brute_acc = accuracy_of(brute_predict(&w, &x_test).into_iter(), &y_test);

    assert!(
        (svm_acc - brute_acc).abs() <= 0.02,
        "svm {svm_acc:.4} vs exhaustive search {brute_acc:.4}"
    );
    assert!(svm_acc > 0.8, "blobs are well separated, got {svm_acc:.4}");
}

#[test]
fn identical_inputs_give_identical_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = blobs(40, &mut rng);
    let a = fit_linear_svm(&x, 2, &y, 3, 0.1).unwrap();
    let b = fit_linear_svm(&x, 2, &y, 3, 0.1).unwrap();
    for (u, v) in a.weights.iter().chain(&a.biases).zip(b.weights.iter().chain(&b.biases)) {
        assert!((u - v).abs() <= 1e-8);
    }
}

/// Pure-noise images with coin-flip labels.
fn random_label_task(seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2_000;
    let size = (3, 8, 8);
    let images: Vec<f32> = (0..n * 3 * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let groups: Vec<u32> = (0..n as u32).map(|i| i / 4).collect();
    let splits = grouped_split(&groups, &labels, 2, &mut rng).unwrap();
    Task {
        id: TaskId(0),
        name: "null".into(),
        classes: 2,
        image_size: size,
        images,
        labels,
        groups,
        splits,
        metric: MetricKind::RocAuc,
        related_group: None,
    }
}

#[test]
fn random_trunk_on_random_labels_scores_chance() {
    let trunk = TrunkConfig::new((3, 8, 8), &[(8, 2), (16, 2)], true);
    let norm = NormStats::identity(3);
    let mut scores = Vec::new();
    for seed in 0..20u64 {
        let model = MtlModel::<f32>::build_trunk(&trunk, seed).unwrap();
        let task = random_label_task(1_000 + seed);
        let config = FeatureExtractionConfig {
            svm: SvmConfig {
                c_grid: vec![1e-4, 1e-2, 1.0],
                folds: 3,
            },
            ..FeatureExtractionConfig::new(seed)
        };
        let r = transfer_feature_extraction(&model, &task, &norm, SplitKind::Train, SplitKind::Test, &config).unwrap();
        assert!((0.4..=0.6).contains(&r.score), "seed {seed}: AUC {:.4} outside [0.4, 0.6]", r.score);
        scores.push(r.score);
    }
    let (mean, _) = mean_std(&scores);
    assert!((mean - 0.5).abs() < 0.03, "mean AUC {mean:.4}");
}
