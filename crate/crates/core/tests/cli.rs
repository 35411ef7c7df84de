use std::path::Path;
use std::process::{Command, Output};

fn sonodiff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonodiff")).args(args).current_dir(cwd).output().expect("spawn sonodiff")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

const TINY: &str = r#"
batch_size = 4
lr = 1e-3
dataset = "data"
codec_checkpoint = "codec.sdck"
diffusion_checkpoint = "diffusion.sdck"
[codec]
base_channels = 4
decoder_top_channels = 2
[unet]
base_channels = 8
time_embed_dim = 16
channel_mult = [1, 2]
"#;

/// Dataset plus codec and diffusion checkpoints trained through the binary.
fn chain(dir: &Path) {
    let o = sonodiff(&["synth-data", "--n", "200", "--out", "data"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    for (stage, steps) in [("codec", 4), ("diffusion", 4)] {
        let file = format!("{stage}.toml");
        write_config(dir, &file, &format!("stage = \"{stage}\"\nsteps = {steps}\nout = \"{stage}.sdck\"\n{TINY}"));
        let o = sonodiff(&["train", stage, "--config", &file], dir);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sonodiff(&["train", "bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(sonodiff(&["generate", "--count", "many"], dir.path()).status.code(), Some(2));
    assert_eq!(sonodiff(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_print_kind_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = sonodiff(&["train", "codec", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind="), "{}", stderr(&o));
}

#[test]
fn stage_argument_must_match_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.toml", "stage = \"codec\"\nsteps = 1\n");
    let o = sonodiff(&["train", "diffusion", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=stage_mismatch"), "{}", stderr(&o));
}

#[test]
fn train_generate_verify_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    chain(d);

    let gen = |out: &str| {
        let args = ["generate", "--codec", "codec.sdck", "--diffusion", "diffusion.sdck", "--prompt", "benign", "--count", "2", "--steps", "3", "--seed", "9", "--out", out];
        let o = sonodiff(&args, d);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    gen("a");
    gen("b");
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["class_id"], 1);
    let pngs = |sub: &str| {
        let mut v: Vec<_> = std::fs::read_dir(d.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        v.sort();
        v.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    let a = pngs("a");
    assert_eq!(a.len(), 2);
    assert_eq!(a, pngs("b"));

    // A mask without a control checkpoint is refused.
    std::fs::write(d.join("mask.png"), &a[0]).unwrap();
    let o = sonodiff(&["generate", "--codec", "codec.sdck", "--diffusion", "diffusion.sdck", "--class-id", "2", "--mask", "mask.png", "--steps", "2"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=control_unavailable"), "{}", stderr(&o));

    let o = sonodiff(&["verify", "--quick", "--checkpoint", "codec.sdck"], d);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut bytes = std::fs::read(d.join("diffusion.sdck")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(d.join("diffusion.sdck"), bytes).unwrap();
    let o = sonodiff(&["verify", "--quick", "--checkpoint", "diffusion.sdck"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=hash_mismatch"), "{}", stderr(&o));
}
