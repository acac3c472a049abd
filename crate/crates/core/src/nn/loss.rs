use crate::autograd::{softmax_xent, Float, Tensor};
use crate::error::{Error, Result};

/// Per-sample categorical cross-entropy and the softmax probabilities.
pub fn softmax_cross_entropy<F: Float>(logits: &Tensor<F>, labels: &[usize]) -> Result<(Vec<F>, Tensor<F>)> {
    let [n, c] = logits.dims() else {
        return Err(Error::shape("softmax_cross_entropy", format!("expected N×C, got {:?}", logits.dims())));
    };
    let (n, c) = (*n, *c);
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} not in [0, {c})")));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let (losses, probs) = softmax_xent(logits.data(), labels, n, c);
    Ok((losses, Tensor::new(vec![n, c], probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(&[3, 8]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3, 7]).unwrap();
        for l in loss {
            assert!((l - 8f64.ln()).abs() < 1e-12);
        }
        assert!(probs.data().iter().all(|p| (p - 0.125).abs() < 1e-12));
    }

    #[test]
    fn dominant_logit_gives_vanishing_loss() {
        let logits = Tensor::<f64>::from_f64_slice(&[1, 3], &[0.0, 200.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss[0] >= 0.0 && loss[0] < 1e-12);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c) = (16, 5);
        let raw: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let logits = Tensor::<f64>::from_f64_slice(&[n, c], &raw).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        for j in 0..n {
            let row = &raw[j * c..(j + 1) * c];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let oracle = -(row[labels[j]].exp() / z).ln();
            assert!((loss[j] - oracle).abs() < 1e-6);
            let s: f64 = probs.data()[j * c..(j + 1) * c].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let logits = Tensor::<f32>::from_f64_slice(&[1, 2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_cross_entropy(&logits, &[0]), Err(Error::NonFinite(_))));
    }
}
