//! Acceptance run: one pass/fail line per criterion, smoke-scale models.
//!
//! Set `BUSI_DIR` to a BUSI download to include the real-data ingestion
//! counts in criterion 10.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sonodiff::checkpoint::{Checkpoint, Stage};
use sonodiff::codec;
use sonodiff::data::{busi_mix, ingest_busi, stack_planes, synth_generate, write_busi_layout, Dataset, Sample, Split, BUSI_COUNTS};
use sonodiff::evaluator::auc::{auc_ovr, pair_count_auc};
use sonodiff::evaluator::experiments::{
    evaluate_classifier, generate_samples, pick, run_augmentation_experiment, run_coverage_experiment, run_mask_experiment,
    train_classifier, EvalConfig,
};
use sonodiff::generate::{generate, GenerationRequest, Models};
use sonodiff::numerics::PortableRng;
use sonodiff::trainer::{load_control, moving_average, train, TrainConfig, TrainInputs, TrainOutput};
use sonodiff::verify;
use sonodiff::{Error, Result};

const MA_WINDOW: usize = 50;
const PSNR_SMOKE: f64 = 15.0;
const PSNR_FULL: f64 = 20.0;
const ACC_SMOKE: f64 = 0.5;
const ACC_FULL: f64 = 0.7;
const FREEZE_STEPS: u64 = 200;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke")
}

fn smoke(stage: &str) -> Result<TrainConfig> {
    TrainConfig::load(&configs().join(format!("{stage}.toml")))
}

fn quiet(cfg: &TrainConfig, inputs: TrainInputs<'_>) -> Result<TrainOutput> {
    train(cfg, inputs, &mut |_| {})
}

fn c1_autodiff() -> Result<Outcome> {
    let checks = verify::grad_checks(20, 20)?;
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    outcome(
        failed.is_empty(),
        format!("{} op/graph families x 20 seeds, worst relative error {worst:.2e} (bound 1e-4) {failed:?}", checks.len()),
    )
}

fn c2_schedule() -> Result<Outcome> {
    let checks = verify::schedule_identities()?;
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.line()).collect();
    let worst_rt = checks.iter().filter(|c| c.name.ends_with("round_trip")).map(|c| c.value).fold(0.0, f64::max);
    outcome(failed.is_empty(), format!("T in {{1,2,50,1000}}, worst round trip {worst_rt:.2e} {failed:?}"))
}

fn c3_zero_conv() -> Result<Outcome> {
    let c = verify::zero_conv_identity(100, 7)?;
    outcome(c.passed, format!("max |controlled - base| over 100 tuples = {}", c.value))
}

/// Shared smoke-scale models.
struct Stack {
    ds: Dataset,
    codec: Checkpoint,
    diffusion: Checkpoint,
    diffusion_losses: Vec<f64>,
    control_200: Checkpoint,
    control: Checkpoint,
    eval: EvalConfig,
}

fn build_stack() -> Result<Stack> {
    let mut ds = synth_generate(780, busi_mix(), 0)?;
    ds.split([0.7, 0.15, 0.15], 0)?;
    let codec = quiet(&smoke("codec")?, TrainInputs::new(&ds))?.checkpoint;
    let d = quiet(&smoke("diffusion")?, TrainInputs { codec: Some(&codec), ..TrainInputs::new(&ds) })?;
    let mut ctl_cfg = smoke("control")?;
    let full_steps = ctl_cfg.steps;
    ctl_cfg.steps = FREEZE_STEPS;
    let parents = TrainInputs { codec: Some(&codec), diffusion: Some(&d.checkpoint), ..TrainInputs::new(&ds) };
    let control_200 = quiet(&ctl_cfg, parents)?.checkpoint;
    ctl_cfg.steps = full_steps;
    let control = quiet(&ctl_cfg, TrainInputs { resume: Some(&control_200), ..parents })?.checkpoint;
    let eval = EvalConfig::load(&configs().join("eval.toml"))?;
    Ok(Stack { ds, codec, diffusion: d.checkpoint, diffusion_losses: d.losses, control_200, control, eval })
}

fn c4_freezing(s: &Stack) -> Result<Outcome> {
    let before = s.diffusion.params.hash("unet");
    let model = load_control(&s.control_200, &s.diffusion)?;
    let after = model.base_hash();
    let no_base_blobs = s.control_200.params.iter().all(|q| q.name.starts_with("control."));
    let zero_moved = s.control_200.params.iter().filter(|q| q.name.starts_with("control.zero.")).any(|q| q.tensor.max_abs() > 0.0);
    outcome(
        before == after && no_base_blobs && zero_moved,
        format!(
            "{FREEZE_STEPS}-step control run: base sha256 {}… before, {}… after; checkpoint holds only control blobs: {no_base_blobs}; zero convs trained: {zero_moved}",
            &before[..12],
            &after[..12]
        ),
    )
}

fn tiny_cfg(stage: Stage, steps: u64) -> TrainConfig {
    let mut c = TrainConfig::new(stage, steps);
    c.batch_size = 4;
    c.lr = Some(1e-3);
    c.seed = 11;
    c.codec.base_channels = 4;
    c.codec.decoder_top_channels = 2;
    c.unet.base_channels = 8;
    c.unet.time_embed_dim = 16;
    c.unet.channel_mult = vec![1, 2];
    c.classifier.channels = vec![4, 8, 8];
    c
}

/// Same result straight through and with a stop at `cut` plus a resume.
fn resume_equal(cfg: &TrainConfig, inputs: TrainInputs<'_>, cut: u64) -> Result<(bool, Checkpoint)> {
    let a = quiet(cfg, inputs)?.checkpoint;
    let b = quiet(cfg, inputs)?.checkpoint;
    let mut first = cfg.clone();
    first.steps = cut;
    let part = quiet(&first, inputs)?.checkpoint;
    let resumed = quiet(cfg, TrainInputs { resume: Some(&part), ..inputs })?.checkpoint;
    let bytes = a.to_bytes()?;
    Ok((bytes == b.to_bytes()? && bytes == resumed.to_bytes()?, a))
}

fn c5_determinism() -> Result<Outcome> {
    let mut ds = synth_generate(160, busi_mix(), 5)?;
    ds.split([0.8, 0.0, 0.2], 5)?;
    let base = TrainInputs::new(&ds);
    let (codec_ok, codec) = resume_equal(&tiny_cfg(Stage::Codec, 6), base, 3)?;
    let with_codec = TrainInputs { codec: Some(&codec), ..base };
    let (diff_ok, diffusion) = resume_equal(&tiny_cfg(Stage::Diffusion, 6), with_codec, 2)?;
    let with_both = TrainInputs { diffusion: Some(&diffusion), ..with_codec };
    let (ctl_ok, control) = resume_equal(&tiny_cfg(Stage::Control, 4), with_both, 1)?;
    let (cls_ok, _) = resume_equal(&tiny_cfg(Stage::Classifier, 6), base, 4)?;

    let models = Models::from_checkpoints(&codec, &diffusion, Some(&control))?;
    let mask = {
        let m = ds.samples.iter().find(|s| s.class_id == 2).expect("malignant sample");
        let gray = sonodiff::imaging::mask_to_gray(&m.mask, 64, 64)?;
        base64_png(&gray)?
    };
    let req = GenerationRequest { class_id: Some(2), steps: 4, count: 2, seed: 3, mask: Some(mask), ..Default::default() };
    let png_ok = generate(&models, &req)?.pngs == generate(&models, &req)?.pngs;
    let all = codec_ok && diff_ok && ctl_ok && cls_ok && png_ok;
    outcome(
        all,
        format!("bit-identical reruns and stop/resume: codec {codec_ok}, diffusion {diff_ok}, control {ctl_ok}, classifier {cls_ok}; PNG replay {png_ok}"),
    )
}

fn base64_png(gray: &image::GrayImage) -> Result<String> {
    use base64::Engine as _;
    Ok(base64::engine::general_purpose::STANDARD.encode(sonodiff::imaging::encode_png(gray)?))
}

fn c6_reference_run(s: &Stack) -> Result<Outcome> {
    let cfg = sonodiff::trainer::codec_config(&s.codec)?;
    let test = s.ds.subset(Split::Test);
    let x = stack_planes(test.iter().map(|t| &t.image))?;
    let recon = codec::decode(&s.codec.params, &cfg, &codec::encode(&s.codec.params, &cfg, &x)?.mu)?;
    let psnr = codec::psnr(&x, &recon)?;

    let ma = moving_average(&s.diffusion_losses, MA_WINDOW);
    let (start, end) = (ma[MA_WINDOW - 1], *ma.last().expect("losses"));

    let train_split = s.ds.subset(Split::Train);
    let judge = train_classifier(&train_split, &s.eval.classifier_model, &s.eval.classifier, s.eval.seed)?;
    let models = Models::from_checkpoints(&s.codec, &s.diffusion, None)?;
    let generated = generate_samples(&models, s.eval.per_class, &s.eval.sampling, 1)?;
    let refs: Vec<&Sample> = generated.iter().collect();
    let judged = evaluate_classifier(&judge, &refs)?;

    let passed = psnr >= PSNR_SMOKE && end < 0.5 * start && judged.accuracy >= ACC_SMOKE;
    outcome(
        passed,
        format!(
            "held-out PSNR {psnr:.2} dB (smoke >= {PSNR_SMOKE}, full >= {PSNR_FULL}); diffusion loss MA{MA_WINDOW} {start:.3} -> {end:.3} ({:.0}%); generated-class accuracy {:.3} on {} samples (smoke >= {ACC_SMOKE}, full >= {ACC_FULL}) confusion {:?}",
            100.0 * end / start,
            judged.accuracy,
            refs.len(),
            judged.confusion
        ),
    )
}

fn c7_augmentation(s: &Stack) -> Result<Outcome> {
    let models = Models::from_checkpoints(&s.codec, &s.diffusion, None)?;
    let generated = generate_samples(&models, s.eval.per_class, &s.eval.sampling, 2)?;
    let r = run_augmentation_experiment(&s.ds, &generated, Some(&s.diffusion), &s.eval.classifier_model, &s.eval.classifier, s.eval.seed)?;
    outcome(
        r.within_tolerance,
        format!(
            "AUC A {:.4} -> B {:.4} (delta {:+.4}, need >= -0.02) with {} generated images; reference anchors 0.81 -> 0.87",
            r.baseline.auc_macro, r.augmented.auc_macro, r.delta_auc, r.generated
        ),
    )
}

fn c8_coverage(s: &Stack) -> Result<Outcome> {
    let cov = s.eval.coverage.as_ref().ok_or_else(|| Error::InvalidArgument("eval.toml lacks [coverage]".into()))?;
    let r = run_coverage_experiment(&s.ds, cov)?;
    outcome(
        r.beats_null,
        format!(
            "fraction {} subset {:?}: generated-only classifier AUC {:.4} vs {}-permutation null q99.7 {:.4} (mean {:.4}); reference anchor 0.94",
            r.fraction, r.subset_counts, r.report.auc_macro, r.permutations, r.null_q997, r.null_mean
        ),
    )
}

fn c9_mask(s: &Stack) -> Result<Outcome> {
    let models = Models::from_checkpoints(&s.codec, &s.diffusion, Some(&s.control))?;
    let held: Vec<&Sample> = s
        .ds
        .samples
        .iter()
        .filter(|x| x.split != Split::Train && x.mask.data().iter().any(|&v| v >= 0.5))
        .collect();
    let chosen: Vec<&Sample> = pick(&held, s.eval.masks, s.eval.seed).into_iter().map(|i| held[i]).collect();
    let r = run_mask_experiment(&models, &chosen, &s.eval.sampling, s.eval.seed)?;
    outcome(
        r.masks == 100 && r.ratio >= 2.0,
        format!("{} held-out masks: mean IoU {:.4} vs shuffled-pair null {:.4} (ratio {:.2}, need >= 2)", r.masks, r.mean_iou, r.null_mean, r.ratio),
    )
}

fn c10_ingestion() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let ds = synth_generate(60, busi_mix(), 10)?;
    write_busi_layout(&ds, dir.path())?;
    let r = ingest_busi(dir.path())?;
    let mut exact = r.errors.is_empty() && r.dataset.counts() == ds.counts();
    for c in 0..3 {
        let a = ds.samples.iter().filter(|s| s.class_id == c);
        let b = r.dataset.samples.iter().filter(|s| s.class_id == c);
        exact &= a.zip(b).all(|(x, y)| x.mask == y.mask);
    }
    let mut detail = format!("fixture round trip of {} images: masks exact {exact}", ds.len());
    let mut passed = exact;
    match std::env::var_os("BUSI_DIR") {
        Some(p) => {
            let real = ingest_busi(Path::new(&p))?;
            let counts = real.dataset.counts();
            passed &= counts == BUSI_COUNTS;
            detail.push_str(&format!("; real BUSI counts {counts:?} (expected {BUSI_COUNTS:?})"));
        }
        None => detail.push_str("; real BUSI check skipped (BUSI_DIR unset)"),
    }
    outcome(passed, detail)
}

fn c11_auc_oracle() -> Result<Outcome> {
    let mut rng = PortableRng::new(1111);
    let mut compared = 0;
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = 2 + rng.below(19);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        // Scores on a coarse grid so ties are frequent.
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.below(5) as f64 / 4.0).collect()).collect();
        let r = auc_ovr(&scores, &labels)?;
        for c in 0..3 {
            let col: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            compared += 1;
            mismatches += usize::from(r.per_class[c] != pair_count_auc(&col, &pos));
        }
    }
    outcome(mismatches == 0 && compared >= 1400, format!("{compared} per-class AUCs from 500 instances, {mismatches} differ from pair counting"))
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(u32, &str, Result<Outcome>, f64)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Result<Outcome>| {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let line = match &r {
            Ok(o) => format!("criterion {id:>2} {name}: {} ({secs:.1}s) {}", if o.passed { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("criterion {id:>2} {name}: FAIL ({secs:.1}s) error kind={} {e}", e.kind()),
        };
        println!("{line}");
        results.push((id, name, r, secs));
    };
    run(1, "autodiff", &mut c1_autodiff);
    run(2, "schedule identities", &mut c2_schedule);
    run(3, "zero-conv identity", &mut c3_zero_conv);
    run(10, "busi ingestion", &mut c10_ingestion);
    run(11, "auc oracle", &mut c11_auc_oracle);
    run(5, "determinism", &mut c5_determinism);

    let t = Instant::now();
    let stack = build_stack();
    println!("shared smoke stack trained in {:.1}s", t.elapsed().as_secs_f64());
    match &stack {
        Ok(s) => {
            run(4, "freezing contract", &mut || c4_freezing(s));
            run(6, "reference run", &mut || c6_reference_run(s));
            run(7, "augmentation", &mut || c7_augmentation(s));
            run(8, "coverage", &mut || c8_coverage(s));
            run(9, "mask adherence", &mut || c9_mask(s));
        }
        Err(e) => {
            for (id, name) in [(4, "freezing contract"), (6, "reference run"), (7, "augmentation"), (8, "coverage"), (9, "mask adherence")] {
                run(id, name, &mut || Err(Error::Dataset(format!("smoke stack failed: {e}"))));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let passed = results.iter().filter(|r| matches!(&r.2, Ok(o) if o.passed)).count();
    println!("acceptance: {passed}/{} criteria passed in {:.1}s", results.len(), total.elapsed().as_secs_f64());
    if passed != results.len() {
        std::process::exit(1);
    }
}
