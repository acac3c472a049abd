use super::graph::{Feed, Graph, NodeId};
use super::param::ParamStore;
use super::tensor::Float;
use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchNormState;

/// Compares analytic gradients against central finite differences.
///
/// For each parameter tensor reachable by the graph the error is
/// `max|analytic − numeric| / max(max|numeric|, 1e-8)`; the maximum over
/// parameters is returned. Batch-norm running statistics are restored after
/// the check, parameter values are restored exactly.
pub fn grad_check<F: Float>(
    graph: &mut Graph<F>,
    params: &mut ParamStore<F>,
    bn: &mut [BatchNormState<F>],
    feed: &Feed<F>,
    loss: NodeId,
    eps: f64,
) -> Result<f64> {
    if !F::IS_F64 {
        return Err(Error::GradCheckPrecision);
    }
    let saved_bn = bn.to_vec();
    graph.forward(params, bn, feed)?;
    graph.backward(loss, params)?;

    let mut worst = 0.0f64;
    let mut ids = graph.params();
    ids.sort();
    ids.dedup();
    for id in ids {
        let analytic = params.get(id).grad.to_f64_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = F::from_f64(orig.to_f64() + eps);
            let plus = eval_loss(graph, params, bn, feed, loss)?;
            params.get_mut(id).value.data_mut()[i] = F::from_f64(orig.to_f64() - eps);
            let minus = eval_loss(graph, params, bn, feed, loss)?;
            params.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(1e-8);
        worst = worst.max(diff / scale);
    }
    bn.clone_from_slice(&saved_bn);
    Ok(worst)
}

fn eval_loss<F: Float>(
    graph: &mut Graph<F>,
    params: &ParamStore<F>,
    bn: &mut [BatchNormState<F>],
    feed: &Feed<F>,
    loss: NodeId,
) -> Result<f64> {
    graph.forward(params, bn, feed)?;
    let v = graph.value(loss).expect("forward ran");
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.dims().to_vec()));
    }
    Ok(v.data()[0].to_f64())
}
