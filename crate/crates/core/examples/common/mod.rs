//! Model loading shared by the examples.
#![allow(dead_code)]

use std::path::PathBuf;

use sonodiff::checkpoint::{Checkpoint, Stage};
use sonodiff::data::{busi_mix, synth_generate, Dataset};
use sonodiff::trainer::{train, TrainConfig, TrainInputs};

pub struct Stack {
    pub dataset: Dataset,
    pub codec: Checkpoint,
    pub diffusion: Checkpoint,
    pub control: Option<Checkpoint>,
}

/// Checkpoints from `SONODIFF_RUN` (a directory holding `codec.sdck`,
/// `diffusion.sdck` and optionally `control.sdck`), otherwise a small stack
/// trained on the spot. The quick stack is only good enough to exercise the API.
pub fn stack(with_control: bool) -> sonodiff::Result<Stack> {
    let mut dataset = synth_generate(240, busi_mix(), 0)?;
    dataset.split([0.7, 0.15, 0.15], 0)?;
    if let Some(dir) = std::env::var_os("SONODIFF_RUN").map(PathBuf::from) {
        let load = |name: &str| Checkpoint::load(&dir.join(name)).map(|(c, _)| c);
        let control = if with_control { Some(load("control.sdck")?) } else { load("control.sdck").ok() };
        return Ok(Stack { codec: load("codec.sdck")?, diffusion: load("diffusion.sdck")?, control, dataset });
    }
    println!("SONODIFF_RUN unset; training a quick stack");
    let mut c = TrainConfig::new(Stage::Codec, 120);
    c.batch_size = 8;
    c.codec.base_channels = 8;
    c.codec.decoder_top_channels = 4;
    let codec = train(&c, TrainInputs::new(&dataset), &mut |_| {})?.checkpoint;

    let mut d = TrainConfig::new(Stage::Diffusion, 300);
    d.batch_size = 16;
    d.lr = Some(1e-3);
    d.unet.base_channels = 16;
    d.unet.time_embed_dim = 64;
    d.unet.channel_mult = vec![1, 2];
    let inputs = TrainInputs { codec: Some(&codec), ..TrainInputs::new(&dataset) };
    let diffusion = train(&d, inputs, &mut |_| {})?.checkpoint;

    let control = if with_control {
        let mut k = d.clone();
        k.stage = Stage::Control;
        k.steps = 100;
        k.batch_size = 8;
        let inputs = TrainInputs { diffusion: Some(&diffusion), ..inputs };
        Some(train(&k, inputs, &mut |_| {})?.checkpoint)
    } else {
        None
    };
    Ok(Stack { dataset, codec, diffusion, control })
}
