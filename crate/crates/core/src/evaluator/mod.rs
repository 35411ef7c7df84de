//! Classifier-based evaluation and mask adherence.

pub mod auc;
pub mod classifier;
pub mod experiments;
pub mod mask;

pub use auc::{auc_ovr, pair_count_auc, permutation_null, AucReport};
pub use classifier::{ClassifierConfig, init_classifier, predict_proba};
pub use experiments::{
    run_augmentation_experiment, run_coverage_experiment, run_mask_experiment, AugmentationReport, CoverageReport,
    EvalReport, MaskReport,
};
pub use mask::{mask_adherence, shuffled_pair_null};
