//! File-driven stage chain: dataset on disk, codec, diffusion and control checkpoints, then a resume.
//!
//! ```text
//! cargo run --release --example control_training -- /tmp/sonodiff-run
//! ```

use std::path::PathBuf;

use sonodiff::checkpoint::{Checkpoint, Stage};
use sonodiff::data::{busi_mix, synth_generate};
use sonodiff::trainer::{read_log, train_stage, TrainConfig};

fn main() -> sonodiff::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("sonodiff-run"));
    let mut ds = synth_generate(200, busi_mix(), 0)?;
    ds.split([0.7, 0.15, 0.15], 0)?;
    ds.save(&dir.join("data"))?;

    let stage = |stage: Stage, steps: u64| {
        let mut c = TrainConfig::new(stage, steps);
        c.dataset = dir.join("data");
        c.out = dir.join(format!("{}.sdck", stage.name()));
        c.batch_size = 8;
        c.lr = Some(1e-3);
        c.codec.base_channels = 8;
        c.codec.decoder_top_channels = 4;
        c.unet.base_channels = 8;
        c.unet.time_embed_dim = 32;
        c.unet.channel_mult = vec![1, 2];
        c.codec_checkpoint = Some(dir.join("codec.sdck"));
        c.diffusion_checkpoint = Some(dir.join("diffusion.sdck"));
        c
    };

    for (s, steps) in [(Stage::Codec, 60), (Stage::Diffusion, 60)] {
        let (_, hash) = train_stage(&stage(s, steps))?;
        println!("{:>9} {hash}", s.name());
    }

    // Control in two legs: 20 steps, then resume to 40.
    let mut ctl = stage(Stage::Control, 20);
    train_stage(&ctl)?;
    ctl.steps = 40;
    ctl.resume = Some(ctl.out.clone());
    let (_, hash) = train_stage(&ctl)?;
    let (ck, _) = Checkpoint::load(&ctl.out)?;
    println!("  control {hash} step {} parent {}", ck.header.step, ck.header.parent_hash.as_deref().unwrap_or("-"));
    println!("control blobs: {}", ck.params.iter().count());
    let log = read_log(&ctl.log_path())?;
    println!("log holds {} records, last loss {:.4}", log.len(), log.last().map(|r| r.loss).unwrap_or(f64::NAN));
    Ok(())
}
