use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchNormState;

pub const KERNEL_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    pub stride: usize,
}

/// A plain CNN trunk: `stages` of 3×3 conv → (batch-norm) → ReLU, followed by
/// global average pooling producing `feature_dim` features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkConfig {
    /// `(channels, height, width)`.
    pub input_size: (usize, usize, usize),
    pub stages: Vec<StageConfig>,
    pub use_batchnorm: bool,
    pub feature_dim: usize,
}

impl TrunkConfig {
    pub fn new(input_size: (usize, usize, usize), stages: &[(usize, usize)], use_batchnorm: bool) -> Self {
        let stages: Vec<StageConfig> = stages
            .iter()
            .map(|&(out_channels, stride)| StageConfig { out_channels, stride })
            .collect();
        let feature_dim = stages.last().map_or(0, |s| s.out_channels);
        TrunkConfig {
            input_size,
            stages,
            use_batchnorm,
            feature_dim,
        }
    }

    /// Three stride-2 stages of 16/32/64 channels with batch-norm.
    pub fn desk_default(input_size: (usize, usize, usize)) -> Self {
        Self::new(input_size, &[(16, 2), (32, 2), (64, 2)], true)
    }

    /// Built-in trunk architectures selectable by name in a hyperparameter grid.
    pub fn for_arch(arch: &str, input_size: (usize, usize, usize)) -> Result<Self> {
        let stages: &[(usize, usize)] = match arch {
            "plain3" => &[(16, 2), (32, 2), (64, 2)],
            "plain4" => &[(16, 1), (32, 2), (48, 2), (64, 2)],
            "tiny" => &[(8, 2), (16, 2)],
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown trunk architecture `{other}` (known: plain3, plain4, tiny)"
                )))
            }
        };
        Ok(Self::new(input_size, stages, true))
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_size;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!("input size {:?} must be positive", self.input_size)));
        }
        let Some(last) = self.stages.last() else {
            return Err(Error::InvalidConfig("trunk needs at least one stage".into()));
        };
        if self.feature_dim != last.out_channels {
            return Err(Error::InvalidConfig(format!(
                "feature_dim {} must equal the last stage's {} channels",
                self.feature_dim, last.out_channels
            )));
        }
        let (mut h, mut w) = (h, w);
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.stride == 0 {
                return Err(Error::InvalidConfig(format!("stage {i} has zero channels or stride")));
            }
            let pad = KERNEL_SIZE / 2;
            if h + 2 * pad < KERNEL_SIZE || w + 2 * pad < KERNEL_SIZE {
                return Err(Error::InvalidConfig(format!("stage {i} input {h}×{w} is too small")));
            }
            h = (h + 2 * pad - KERNEL_SIZE) / s.stride + 1;
            w = (w + 2 * pad - KERNEL_SIZE) / s.stride + 1;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLayout {
    pub conv: ParamId,
    /// Present only when the stage has no batch-norm.
    pub conv_bias: Option<ParamId>,
    /// Index into the owning model's batch-norm states.
    pub bn: Option<usize>,
    pub stride: usize,
}

/// Parameter wiring of a trunk inside a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkLayout {
    pub config: TrunkConfig,
    pub stages: Vec<StageLayout>,
}

impl TrunkLayout {
    pub fn param_ids<F: Float>(&self, bn: &[BatchNormState<F>]) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.push(s.conv);
            ids.extend(s.conv_bias);
            if let Some(b) = s.bn {
                ids.push(bn[b].gamma);
                ids.push(bn[b].beta);
            }
        }
        ids
    }

    /// Appends the trunk to `graph`, returning the `(N, feature_dim)` node.
    pub fn append_to_graph<F: Float>(
        &self,
        graph: &mut Graph<F>,
        input: NodeId,
        bn: &[BatchNormState<F>],
    ) -> NodeId {
        let mut x = input;
        for s in &self.stages {
            let k = graph.param(s.conv);
            x = graph.conv2d(x, k, s.stride, KERNEL_SIZE / 2);
            if let Some(b) = s.conv_bias {
                let bn_ = graph.param(b);
                x = graph.add_bias(x, bn_);
            }
            if let Some(layer) = s.bn {
                let gamma = graph.param(bn[layer].gamma);
                let beta = graph.param(bn[layer].beta);
                x = graph.batchnorm(x, gamma, beta, layer);
            }
            x = graph.relu(x);
        }
        graph.global_avg_pool(x)
    }
}

/// Fan-in scaled uniform initialization, `U(-bound, bound)` with
/// `bound = sqrt(gain / fan_in)`.
pub fn uniform_init<F: Float, R: Rng>(dims: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<F> {
    let bound = (gain / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(dims.to_vec(), data).expect("dims are positive")
}

/// Registers trunk parameters in `params` and batch-norm states in `bn`.
pub(crate) fn init_trunk<F: Float, R: Rng>(
    config: &TrunkConfig,
    params: &mut ParamStore<F>,
    bn: &mut Vec<BatchNormState<F>>,
    rng: &mut R,
) -> Result<TrunkLayout> {
    config.validate()?;
    let mut in_ch = config.input_size.0;
    let mut stages = Vec::with_capacity(config.stages.len());
    for (i, s) in config.stages.iter().enumerate() {
        let fan_in = in_ch * KERNEL_SIZE * KERNEL_SIZE;
        let w = uniform_init(&[s.out_channels, in_ch, KERNEL_SIZE, KERNEL_SIZE], fan_in, 6.0, rng);
        let conv = params.add(format!("trunk.stage{i}.conv.weight"), w)?;
        let (conv_bias, bn_idx) = if config.use_batchnorm {
            let gamma = params.add(
                format!("trunk.stage{i}.bn.gamma"),
                Tensor::filled(&[s.out_channels], F::ONE),
            )?;
            let beta = params.add(format!("trunk.stage{i}.bn.beta"), Tensor::zeros(&[s.out_channels]))?;
            bn.push(BatchNormState::new(s.out_channels, gamma, beta));
            (None, Some(bn.len() - 1))
        } else {
            let b = params.add(format!("trunk.stage{i}.conv.bias"), Tensor::zeros(&[s.out_channels]))?;
            (Some(b), None)
        };
        stages.push(StageLayout {
            conv,
            conv_bias,
            bn: bn_idx,
            stride: s.stride,
        });
        in_ch = s.out_channels;
    }
    Ok(TrunkLayout {
        config: config.clone(),
        stages,
    })
}
