//! Train the latent codec, report held-out PSNR, and round-trip the checkpoint file.
//!
//! ```text
//! cargo run --release --example train_codec -- 400
//! ```

use sonodiff::checkpoint::{Checkpoint, Stage};
use sonodiff::codec;
use sonodiff::data::{busi_mix, stack_planes, synth_generate, Split};
use sonodiff::trainer::{codec_config, moving_average, train, TrainConfig, TrainInputs};

fn main() -> sonodiff::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let mut ds = synth_generate(300, busi_mix(), 0)?;
    ds.split([0.8, 0.1, 0.1], 0)?;

    let mut cfg = TrainConfig::new(Stage::Codec, steps);
    cfg.batch_size = 8;
    cfg.codec.base_channels = 8;
    cfg.codec.decoder_top_channels = 4;
    let out = train(&cfg, TrainInputs::new(&ds), &mut |r| {
        if r.step % 50 == 0 {
            println!("step {:>4} loss {:.4}", r.step, r.loss);
        }
    })?;
    let ma = moving_average(&out.losses, 20);
    println!("loss moving average {:.4} -> {:.4}", ma[19.min(ma.len() - 1)], ma[ma.len() - 1]);

    let ck = out.checkpoint;
    let ccfg = codec_config(&ck)?;
    let test = ds.subset(Split::Test);
    let x = stack_planes(test.iter().map(|s| &s.image))?;
    let post = codec::encode(&ck.params, &ccfg, &x)?;
    let recon = codec::decode(&ck.params, &ccfg, &post.mu)?;
    println!("latent shape {:?}", post.mu.shape());
    println!("held-out PSNR {:.2} dB over {} images", codec::psnr(&x, &recon)?, test.len());

    let bytes = ck.to_bytes()?;
    let (back, hash) = Checkpoint::from_bytes(&bytes)?;
    assert_eq!(back.to_bytes()?, bytes);
    println!("checkpoint {} bytes, sha256 {hash}", bytes.len());
    Ok(())
}
