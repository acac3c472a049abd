//! Downstream protocols: feature extraction with a tuned linear SVM,
//! fine-tuning, training from scratch, joint training and a single-source
//! baseline, plus batch-norm recalibration.

mod protocols;
pub mod svm;

pub use protocols::{
    evaluate_head, fine_tune_from, recalibrate_bn, single_source_trunk, task_features, train_joint, train_scratch,
    transfer_feature_extraction, transfer_fine_tune, FeatureExtractionConfig, FeatureExtractionResult, FineTuneConfig,
    FineTuneResult, FineTuneRun, JointResult,
};
pub use svm::{fit_linear_svm, grouped_folds, tune_svm, LinearClassifier, SvmConfig, SvmTuning};
