use rand::Rng;

use super::trunk::uniform_init;
use crate::autograd::{Float, ParamId, ParamStore, Tensor};
use crate::error::Result;
use crate::pool::TaskId;

/// Linear classification head: `f_s × classes` weight plus `classes` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub task: TaskId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl Head {
    pub(crate) fn init<F: Float, R: Rng>(
        task: TaskId,
        feature_dim: usize,
        classes: usize,
        params: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        let w = uniform_init(&[feature_dim, classes], feature_dim, 1.0, rng);
        let weight = params.add(format!("head.{}.weight", task.0), w)?;
        let bias = params.add(format!("head.{}.bias", task.0), Tensor::zeros(&[classes]))?;
        Ok(Head {
            task,
            weight,
            bias,
            classes,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// `f_s·C + C`.
    pub fn param_count(feature_dim: usize, classes: usize) -> usize {
        feature_dim * classes + classes
    }
}
