//! Augmentation experiment: a real-only classifier against one trained on real plus generated images.
//!
//! ```text
//! SONODIFF_RUN=runs/smoke cargo run --release --example evaluate
//! ```

mod common;

use sonodiff::evaluator::experiments::{generate_samples, run_augmentation_experiment, Budget, Sampling};
use sonodiff::evaluator::ClassifierConfig;
use sonodiff::generate::Models;

fn main() -> sonodiff::Result<()> {
    let s = common::stack(false)?;
    let models = Models::from_checkpoints(&s.codec, &s.diffusion, None)?;
    let sampling = Sampling { steps: 25, ..Default::default() };
    let generated = generate_samples(&models, 8, &sampling, 1)?;

    let model = ClassifierConfig { channels: vec![8, 16, 32], ..Default::default() };
    let budget = Budget::new(150, 32);
    let r = run_augmentation_experiment(&s.dataset, &generated, Some(&s.diffusion), &model, &budget, 0)?;
    println!("baseline  AUC {:.4} acc {:.3} per class {:?}", r.baseline.auc_macro, r.baseline.accuracy, r.baseline.per_class_auc);
    println!("augmented AUC {:.4} acc {:.3} per class {:?}", r.augmented.auc_macro, r.augmented.accuracy, r.augmented.per_class_auc);
    println!("delta {:+.4} with {} generated images, within tolerance: {}", r.delta_auc, r.generated, r.within_tolerance);
    println!("augmented confusion (rows true, columns predicted) {:?}", r.augmented.confusion);
    Ok(())
}
