use serde::{Deserialize, Serialize};

use crate::autograd::{Float, ParamId, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with running statistics.
    Eval,
    /// Normalize with running statistics; nothing is updated. Used while the
    /// trunk is frozen during warm-up.
    Frozen,
}

/// Batch-normalization layer state. The affine parameters live in the
/// owning [`ParamStore`](crate::autograd::ParamStore) and are referenced by id.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F = f32> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
    /// When set, running statistics are a cumulative average over the batches
    /// seen since recalibration started (the count so far) instead of an
    /// exponential moving average.
    pub recalibration: Option<usize>,
}

impl<F: Float> BatchNormState<F> {
    pub fn new(channels: usize, gamma: ParamId, beta: ParamId) -> Self {
        BatchNormState {
            gamma,
            beta,
            running_mean: vec![F::ZERO; channels],
            running_var: vec![F::ONE; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::Train,
            recalibration: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<G: Float>(&self) -> BatchNormState<G> {
        BatchNormState {
            gamma: self.gamma,
            beta: self.beta,
            running_mean: self.running_mean.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            running_var: self.running_var.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            momentum: self.momentum,
            eps: self.eps,
            mode: self.mode,
            recalibration: self.recalibration,
        }
    }
}

/// Saved forward quantities needed by the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
    pub batch_stats: bool,
}

fn layout(dims: &[usize]) -> Option<(usize, usize, usize)> {
    match dims {
        [n, c] => Some((*n, *c, 1)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

pub(crate) fn bn_forward<F: Float>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    state: &mut BatchNormState<F>,
) -> Result<(Tensor<F>, BnCache<F>)> {
    let (n, c, s) = layout(x.dims()).ok_or_else(|| {
        Error::shape("batchnorm", format!("expected N×C or N×C×H×W, got {:?}", x.dims()))
    })?;
    if c != state.channels() || gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {c} channels, layer has {}", state.channels()),
        ));
    }
    let count = n * s;
    let batch_stats = state.mode == BnMode::Train;
    if batch_stats && count < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch normalization in train mode needs at least 2 values per channel, got {count}"
        )));
    }
    let xd = x.data();
    let eps = F::from_f64(state.eps);
    let mut xhat = vec![F::ZERO; xd.len()];
    let mut out = vec![F::ZERO; xd.len()];
    let mut inv_std = vec![F::ZERO; c];
    let inv_count = F::ONE / F::from_usize(count);
    for ch in 0..c {
        let (mean, var) = if batch_stats {
            let mut sum = F::ZERO;
            for b in 0..n {
                for &v in &xd[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    sum += v;
                }
            }
            let mean = sum * inv_count;
            let mut sq = F::ZERO;
            for b in 0..n {
                for &v in &xd[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            let var = sq * inv_count;
            let unbiased = sq / F::from_usize(count - 1);
            let m = match state.recalibration {
                Some(seen) => F::ONE / F::from_usize(seen + 1),
                None => F::from_f64(state.momentum),
            };
            state.running_mean[ch] = (F::ONE - m) * state.running_mean[ch] + m * mean;
            state.running_var[ch] = (F::ONE - m) * state.running_var[ch] + m * unbiased;
            (mean, var)
        } else {
            (state.running_mean[ch], state.running_var[ch])
        };
        let is = F::ONE / (var + eps).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                let h = (xd[i] - mean) * is;
                xhat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    if batch_stats {
        if let Some(seen) = state.recalibration.as_mut() {
            *seen += 1;
        }
    }
    let y = Tensor::new(x.dims().to_vec(), out)?;
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<F: Float>(
    dims: &[usize],
    grad: &[F],
    gamma: &[F],
    cache: &BnCache<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (n, c, s) = layout(dims).expect("validated in forward");
    let count = F::from_usize(n * s);
    let mut dx = vec![F::ZERO; grad.len()];
    let mut dgamma = vec![F::ZERO; c];
    let mut dbeta = vec![F::ZERO; c];
    for ch in 0..c {
        let mut sum_g = F::ZERO;
        let mut sum_gx = F::ZERO;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                sum_g += grad[i];
                sum_gx += grad[i] * cache.xhat[i];
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let scale = gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                dx[i] = if cache.batch_stats {
                    scale * (grad[i] - sum_g / count - cache.xhat[i] * sum_gx / count)
                } else {
                    scale * grad[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Applies batch normalization outside of a graph, honouring `state.mode`.
pub fn batchnorm_apply<F: Float>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    state: &mut BatchNormState<F>,
) -> Result<Tensor<F>> {
    bn_forward(x, gamma, beta, state).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(c: usize) -> BatchNormState<f64> {
        BatchNormState::new(c, ParamId(0), ParamId(1))
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::filled(&[4, 2, 3, 3], 2.5);
        let mut st = state(2);
        let y = batchnorm_apply(&x, &[1.0, 1.0], &[0.0, 0.0], &mut st).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn eval_with_unit_stats_is_affine_identity() {
        let x = Tensor::<f64>::from_f64_slice(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut st = state(2);
        st.mode = BnMode::Eval;
        let y = batchnorm_apply(&x, &[2.0, 1.0], &[1.0, 0.0], &mut st).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        let expected = [2.0 * scale + 1.0, -2.0 * scale, scale + 1.0, 3.0 * scale];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(st.running_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn frozen_mode_leaves_running_stats_untouched() {
        let x = Tensor::<f32>::from_f64_slice(&[3, 1, 2, 2], &(0..12).map(f64::from).collect::<Vec<_>>())
            .unwrap();
        let mut st: BatchNormState<f32> = BatchNormState::new(1, ParamId(0), ParamId(1));
        st.running_mean = vec![0.3];
        st.running_var = vec![1.7];
        st.mode = BnMode::Frozen;
        let before = st.clone();
        batchnorm_apply(&x, &[1.0], &[0.0], &mut st).unwrap();
        assert_eq!(st.running_mean[0].to_bits(), before.running_mean[0].to_bits());
        assert_eq!(st.running_var[0].to_bits(), before.running_var[0].to_bits());
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let data: Vec<f64> = (0..8 * 3 * 2 * 2).map(|i| ((i * 7919) % 31) as f64 * 0.3 - 2.0).collect();
        let x = Tensor::<f64>::from_f64_slice(&[8, 3, 2, 2], &data).unwrap();
        let mut st = state(3);
        let y = batchnorm_apply(&x, &[1.0; 3], &[0.0; 3], &mut st).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|b| y.data()[(b * 3 + ch) * 4..(b * 3 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_single_value_per_channel_in_train_mode() {
        let x = Tensor::<f64>::from_f64_slice(&[1, 2], &[1.0, 2.0]).unwrap();
        let mut st = state(2);
        assert!(batchnorm_apply(&x, &[1.0; 2], &[0.0; 2], &mut st).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(&[4, 3]);
        let mut st = state(2);
        assert!(matches!(
            batchnorm_apply(&x, &[1.0; 2], &[0.0; 2], &mut st),
            Err(Error::Shape { .. })
        ));
    }
}
