//! Mask-conditioned sampling through the control branch, scored by mask IoU.
//!
//! ```text
//! SONODIFF_RUN=runs/smoke cargo run --release --example mask_control
//! ```

mod common;

use sonodiff::data::Split;
use sonodiff::diffusion::SamplerConfig;
use sonodiff::evaluator::mask_adherence;
use sonodiff::generate::{render, Models};
use sonodiff::trainer::load_control;

fn main() -> sonodiff::Result<()> {
    let s = common::stack(true)?;
    let control = s.control.as_ref().expect("control checkpoint");
    let base = s.diffusion.params.hash("unet");
    println!("frozen base sha256 {base}");
    assert_eq!(load_control(control, &s.diffusion)?.base_hash(), base);

    let models = Models::from_checkpoints(&s.codec, &s.diffusion, Some(control))?;
    let sampler = SamplerConfig { steps: 25, ..Default::default() };
    let held = s.dataset.subset(Split::Test);
    for sample in held.iter().filter(|x| x.class_id != 0).take(4) {
        let mask = sample.mask.clone().reshape([1, 1, 64, 64])?;
        let img = render(&models, sample.class_id, Some(&mask), &sampler, 1)?;
        let iou = mask_adherence(&img.reshape([64, 64])?, &sample.mask)?;
        println!("class {} mask area {:>4} IoU {iou:.3}", sample.class_id, sample.mask.data().iter().filter(|&&v| v >= 0.5).count());
    }
    Ok(())
}
