//! Multi-task pre-training and transfer-learning workbench.
//!
//! A shared convolutional trunk is trained jointly on a pool of
//! classification tasks, each with its own linear head. The trained trunk is
//! then transferred to held-out tasks by feature extraction (linear SVM),
//! fine-tuning, or compared against training from scratch and joint
//! training. Hyperparameters are chosen by leave-one-task-out
//! cross-validation with average-rank aggregation.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pool;
pub mod seed;
pub mod trainer;
pub mod transfer;
pub mod workbench;

pub use error::{Error, Result};
