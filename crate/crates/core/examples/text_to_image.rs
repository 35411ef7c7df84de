//! Class-conditioned sampling from a prompt, written as PNGs plus metadata.
//!
//! ```text
//! SONODIFF_RUN=runs/smoke cargo run --release --example text_to_image -- "a malignant breast lesion"
//! ```

mod common;

use sonodiff::generate::{generate, write_generation, GenerationRequest, Models};

fn main() -> sonodiff::Result<()> {
    let prompt = std::env::args().nth(1).unwrap_or_else(|| "Ultrasound image of a benign breast".into());
    let s = common::stack(false)?;
    let models = Models::from_checkpoints(&s.codec, &s.diffusion, None)?;

    let req = GenerationRequest { prompt: Some(prompt), count: 4, steps: 25, seed: 7, ..Default::default() };
    let g = generate(&models, &req)?;
    println!("class {} seed {} in {} ms", g.class_id, g.seed_used, g.timings.total_ms);

    // Same request, same bytes.
    assert_eq!(generate(&models, &req)?.pngs, g.pngs);

    let dir = std::env::temp_dir().join("sonodiff-text-to-image");
    write_generation(&dir, &models, &req, &g)?;
    println!("wrote {} images to {}", g.pngs.len(), dir.display());
    Ok(())
}
