use std::path::Path;

use sonodiff::checkpoint::{Checkpoint, Stage};
use sonodiff::data::{busi_mix, synth_generate};
use sonodiff::trainer::{read_log, train_stage, TrainConfig};

fn tiny(dir: &Path, stage: Stage, steps: u64) -> TrainConfig {
    let mut c = TrainConfig::new(stage, steps);
    c.batch_size = 4;
    c.lr = Some(1e-3);
    c.seed = 3;
    c.dataset = dir.join("data");
    c.out = dir.join(format!("{}.sdck", stage.name()));
    c.codec_checkpoint = Some(dir.join("codec.sdck"));
    c.diffusion_checkpoint = Some(dir.join("diffusion.sdck"));
    c.codec.base_channels = 4;
    c.codec.decoder_top_channels = 2;
    c.unet.base_channels = 8;
    c.unet.time_embed_dim = 16;
    c.unet.channel_mult = vec![1, 2];
    c.classifier.channels = vec![4, 8, 8];
    c
}

#[test]
fn file_driven_chain_resumes_to_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut ds = synth_generate(160, busi_mix(), 1).unwrap();
    ds.split([0.8, 0.1, 0.1], 1).unwrap();
    ds.save(&d.join("data")).unwrap();

    let (_, codec_hash) = train_stage(&tiny(d, Stage::Codec, 4)).unwrap();
    let (_, diff_hash) = train_stage(&tiny(d, Stage::Diffusion, 4)).unwrap();
    let (diff, _) = Checkpoint::load(&d.join("diffusion.sdck")).unwrap();
    assert_eq!(diff.header.parent_hash.as_deref(), Some(codec_hash.as_str()));

    let straight = tiny(d, Stage::Control, 4);
    let (_, straight_hash) = train_stage(&straight).unwrap();
    let straight_bytes = std::fs::read(&straight.out).unwrap();

    let mut leg = tiny(d, Stage::Control, 2);
    leg.out = d.join("leg.sdck");
    train_stage(&leg).unwrap();
    let mut rest = tiny(d, Stage::Control, 4);
    rest.out = d.join("resumed.sdck");
    rest.resume = Some(leg.out.clone());
    let (_, resumed_hash) = train_stage(&rest).unwrap();
    assert_eq!(resumed_hash, straight_hash);
    assert_eq!(std::fs::read(&rest.out).unwrap(), straight_bytes);

    let (ctl, _) = Checkpoint::load(&rest.out).unwrap();
    assert_eq!(ctl.header.parent_hash.as_deref(), Some(diff_hash.as_str()));
    assert_eq!(read_log(&rest.log_path()).unwrap().len(), 2);
}

#[test]
fn resume_refuses_other_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut ds = synth_generate(40, busi_mix(), 2).unwrap();
    ds.split([0.8, 0.1, 0.1], 2).unwrap();
    ds.save(&d.join("data")).unwrap();
    train_stage(&tiny(d, Stage::Classifier, 2)).unwrap();
    let mut c = tiny(d, Stage::Codec, 3);
    c.resume = Some(d.join("classifier.sdck"));
    let e = train_stage(&c).unwrap_err();
    assert_eq!(e.kind(), "stage_mismatch");
}
