//! Network building blocks: the configurable CNN trunk, batch-norm state,
//! per-task linear heads and the cross-entropy loss.

pub mod batchnorm;
mod head;
mod loss;
mod trunk;

pub use batchnorm::{batchnorm_apply, BatchNormState, BnMode, BN_EPS, BN_MOMENTUM};
pub use head::Head;
pub use loss::softmax_cross_entropy;
pub use trunk::{uniform_init, StageConfig, StageLayout, TrunkConfig, TrunkLayout, KERNEL_SIZE};
pub(crate) use trunk::init_trunk;
