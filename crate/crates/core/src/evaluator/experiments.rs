//! Classifier experiments on real, augmented and generated data, and mask
//! adherence of a control checkpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::auc::{auc_ovr, permutation_null, quantile};
use super::classifier::{argmax, predict_proba, ClassifierConfig};
use super::mask::{mask_adherence, shuffled_pair_null};
use crate::checkpoint::{Checkpoint, Stage};
use crate::codec::CodecConfig;
use crate::data::{stack_planes, Dataset, Sample, Source, Split};
use crate::denoiser::UNetConfig;
use crate::diffusion::{SamplerConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::generate::{render, Models, MAX_COUNT};
use crate::numerics::{PortableRng, Tensor};
use crate::trainer::{self, fingerprint, TrainConfig, TrainInputs};

/// Optimizer budget of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr: Option<f64>,
}

fn default_batch() -> usize {
    32
}

impl Budget {
    pub fn new(steps: u64, batch_size: usize) -> Self {
        Self { steps, batch_size, lr: None }
    }

    fn train_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(stage, self.steps);
        cfg.batch_size = self.batch_size;
        cfg.lr = self.lr;
        cfg.seed = seed;
        cfg
    }
}

/// DDIM settings used when an experiment samples images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sampling {
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { steps: 50, guidance: 3.0, eta: 0.0 }
    }
}

impl Sampling {
    fn config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { kind: SamplerKind::Ddim, steps: self.steps, eta: self.eta, guidance_scale: self.guidance, seed }
    }
}

/// Classifier metrics on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean one-vs-rest AUC over classes with positives and negatives.
    pub auc_macro: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub accuracy: f64,
    /// `confusion[true][predicted]`; row sums are the test class counts.
    pub confusion: [[usize; 3]; 3],
    pub test_counts: [usize; 3],
    pub mask_iou_mean: Option<f64>,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub baseline: EvalReport,
    pub augmented: EvalReport,
    pub delta_auc: f64,
    pub generated: usize,
    /// `augmented ≥ baseline − 0.02`.
    pub within_tolerance: bool,
    pub reference: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub fraction: f64,
    pub subset_counts: [usize; 3],
    pub generated: usize,
    pub report: EvalReport,
    pub permutations: usize,
    pub null_mean: f64,
    pub null_q997: f64,
    pub beats_null: bool,
    pub reference: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub masks: usize,
    pub mean_iou: f64,
    pub null_mean: f64,
    /// `mean_iou / null_mean`; infinite when the null is zero.
    pub ratio: f64,
    pub per_mask: Vec<f64>,
    pub hashes: BTreeMap<String, String>,
}

/// Tolerance on the augmented classifier's AUC drop.
pub const AUGMENT_TOLERANCE: f64 = 0.02;
/// Quantile of the permutation null the coverage AUC must exceed.
pub const NULL_QUANTILE: f64 = 0.997;

fn set_hash(samples: &[&Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(fingerprint(&s.image));
        h.update([s.class_id as u8]);
    }
    hex::encode(h.finalize())
}

fn as_train(samples: impl IntoIterator<Item = Sample>, seed: u64) -> Dataset {
    let samples = samples.into_iter().map(|s| Sample { split: Split::Train, ..s }).collect();
    Dataset { seed, samples }
}

/// Trains the evaluation classifier on `samples` (in the given order).
pub fn train_classifier(samples: &[&Sample], model: &ClassifierConfig, budget: &Budget, seed: u64) -> Result<Checkpoint> {
    let ds = as_train(samples.iter().map(|s| (*s).clone()), seed);
    let mut cfg = budget.train_config(Stage::Classifier, seed);
    cfg.classifier = model.clone();
    Ok(trainer::train(&cfg, TrainInputs::new(&ds), &mut |_| {})?.checkpoint)
}

/// Class probabilities of `samples` under a classifier checkpoint.
pub fn classifier_scores(ck: &Checkpoint, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let cfg = trainer::classifier_config(ck)?;
    predict_proba(&ck.params, &cfg, &stack_planes(samples.iter().map(|s| &s.image))?)
}

/// AUC, accuracy and confusion matrix of `scores` against `labels`.
pub fn report_from_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<EvalReport> {
    let auc = auc_ovr(scores, labels)?;
    let mut confusion = [[0usize; 3]; 3];
    let mut test_counts = [0usize; 3];
    for (row, &l) in scores.iter().zip(labels) {
        let p = argmax(row);
        if l >= 3 || p >= 3 {
            return Err(Error::Shape("confusion matrix holds three classes".into()));
        }
        confusion[l][p] += 1;
        test_counts[l] += 1;
    }
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        auc_macro: auc.macro_auc,
        per_class_auc: auc.per_class,
        excluded_classes: auc.excluded,
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
        test_counts,
        mask_iou_mean: None,
        hashes: BTreeMap::new(),
    })
}

/// Scores `test` with `ck` and records the classifier and test-set hashes.
pub fn evaluate_classifier(ck: &Checkpoint, test: &[&Sample]) -> Result<EvalReport> {
    let labels: Vec<usize> = test.iter().map(|s| s.class_id).collect();
    let mut r = report_from_scores(&classifier_scores(ck, test)?, &labels)?;
    r.hashes.insert("classifier".into(), ck.content_hash()?);
    r.hashes.insert("test_set".into(), set_hash(test));
    Ok(r)
}

/// Samples `per_class` images of every class, in chunks of at most
/// [`MAX_COUNT`]. Chunk `k` of class `c` uses seed `seed + 1000·c + k`.
pub fn generate_samples(models: &Models, per_class: usize, sampling: &Sampling, seed: u64) -> Result<Vec<Sample>> {
    let s = models.image_size();
    let mut out = Vec::with_capacity(3 * per_class);
    for c in 0..3 {
        let mut done = 0;
        let mut chunk = 0u64;
        while done < per_class {
            let n = MAX_COUNT.min(per_class - done);
            let imgs = render(models, c, None, &sampling.config(seed + 1000 * c as u64 + chunk), n)?;
            for i in 0..n {
                out.push(Sample {
                    id: format!("gen-{c}-{:04}", done + i),
                    class_id: c,
                    image: imgs.batch_item(i)?.reshape([1, s, s])?,
                    mask: Tensor::zeros([1, s, s]),
                    source: Source::Generated,
                    split: Split::Train,
                });
            }
            done += n;
            chunk += 1;
        }
    }
    Ok(out)
}

/// Fails when the diffusion checkpoint saw any test image during training.
pub fn check_leakage(diffusion: &Checkpoint, test: &[&Sample]) -> Result<()> {
    let seen: BTreeSet<&str> = diffusion.header.data_fingerprints.iter().map(String::as_str).collect();
    let leaked: Vec<&str> = test.iter().filter(|s| seen.contains(fingerprint(&s.image).as_str())).map(|s| s.id.as_str()).collect();
    if !leaked.is_empty() {
        return Err(Error::Leakage(format!(
            "{} test images were in the diffusion training set (first: {})",
            leaked.len(),
            leaked[0]
        )));
    }
    Ok(())
}

/// Classifier A on the real train split, classifier B on the real train split
/// followed by `generated`, both with `seed`, both scored on the test split.
pub fn run_augmentation_experiment(
    real: &Dataset,
    generated: &[Sample],
    diffusion: Option<&Checkpoint>,
    model: &ClassifierConfig,
    budget: &Budget,
    seed: u64,
) -> Result<AugmentationReport> {
    let train = real.subset(Split::Train);
    let test = real.subset(Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("augmentation experiment needs train and test splits".into()));
    }
    if let Some(d) = diffusion {
        d.expect_stage(Stage::Diffusion)?;
        check_leakage(d, &test)?;
    }
    let test_ids: BTreeSet<String> = test.iter().map(|s| fingerprint(&s.image)).collect();
    if generated.iter().any(|s| test_ids.contains(&fingerprint(&s.image))) {
        return Err(Error::Leakage("a generated image is identical to a test image".into()));
    }
    let a = train_classifier(&train, model, budget, seed)?;
    let augmented: Vec<&Sample> = train.iter().copied().chain(generated.iter()).collect();
    let b = train_classifier(&augmented, model, budget, seed)?;
    let mut baseline = evaluate_classifier(&a, &test)?;
    let mut aug = evaluate_classifier(&b, &test)?;
    if let Some(d) = diffusion {
        let h = d.content_hash()?;
        baseline.hashes.insert("diffusion".into(), h.clone());
        aug.hashes.insert("diffusion".into(), h);
    }
    aug.hashes.insert("generated_set".into(), set_hash(&generated.iter().collect::<Vec<_>>()));
    let delta = aug.auc_macro - baseline.auc_macro;
    Ok(AugmentationReport {
        within_tolerance: aug.auc_macro >= baseline.auc_macro - AUGMENT_TOLERANCE,
        baseline,
        augmented: aug,
        delta_auc: delta,
        generated: generated.len(),
        reference: json!({
            "published_baseline_auc": 0.81,
            "published_augmented_auc": 0.87,
            "expected_direction": "increase",
            "note": "reference values from a 512x512 pretrained model on clinical data; not an acceptance bound",
        }),
    })
}

/// Full generative stack for the coverage experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub fraction: f64,
    pub codec: Budget,
    #[serde(default)]
    pub codec_model: CodecConfig,
    pub diffusion: Budget,
    #[serde(default)]
    pub unet: UNetConfig,
    pub classifier: Budget,
    #[serde(default)]
    pub classifier_model: ClassifierConfig,
    /// Generated images per class.
    pub per_class: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_permutations() -> usize {
    200
}

/// Inputs of the `evaluate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: PathBuf,
    #[serde(default)]
    pub codec_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub diffusion_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub control_checkpoint: Option<PathBuf>,
    /// Dataset of generated images for `augment`; sampled from the
    /// checkpoints when absent.
    #[serde(default)]
    pub generated: Option<PathBuf>,
    /// Images sampled per class when `generated` is absent.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_classifier_budget")]
    pub classifier: Budget,
    #[serde(default)]
    pub classifier_model: ClassifierConfig,
    #[serde(default)]
    pub sampling: Sampling,
    /// Test-split masks scored by `mask-iou`.
    #[serde(default = "default_masks")]
    pub masks: usize,
    #[serde(default)]
    pub coverage: Option<CoverageConfig>,
}

fn default_per_class() -> usize {
    32
}

fn default_classifier_budget() -> Budget {
    Budget::new(300, 32)
}

fn default_masks() -> usize {
    100
}

impl Default for EvalConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

impl EvalConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("eval config: {e}")))
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut cfg.dataset);
        for p in [&mut cfg.codec_checkpoint, &mut cfg.diffusion_checkpoint, &mut cfg.control_checkpoint, &mut cfg.generated] {
            if let Some(p) = p.as_mut() {
                fix(p);
            }
        }
        Ok(cfg)
    }

    fn checkpoint(&self, p: &Option<PathBuf>, what: &str) -> Result<Checkpoint> {
        let p = p.as_ref().ok_or_else(|| Error::Dependency(format!("{what}_checkpoint is required")))?;
        Ok(Checkpoint::load(p)?.0)
    }

    /// Codec, diffusion and (when `with_control`) control models named in the config.
    pub fn models(&self, with_control: bool) -> Result<(Models, Checkpoint)> {
        let codec = self.checkpoint(&self.codec_checkpoint, "codec")?;
        let diffusion = self.checkpoint(&self.diffusion_checkpoint, "diffusion")?;
        let control = if with_control { Some(self.checkpoint(&self.control_checkpoint, "control")?) } else { None };
        Ok((Models::from_checkpoints(&codec, &diffusion, control.as_ref())?, diffusion))
    }
}

/// `evaluate augment` driven by an [`EvalConfig`].
pub fn augment_from_config(cfg: &EvalConfig) -> Result<AugmentationReport> {
    let real = Dataset::load(&cfg.dataset)?;
    let (models, diffusion) = cfg.models(false)?;
    let generated = match &cfg.generated {
        Some(p) => Dataset::load(p)?.samples,
        None => generate_samples(&models, cfg.per_class, &cfg.sampling, cfg.seed)?,
    };
    run_augmentation_experiment(&real, &generated, Some(&diffusion), &cfg.classifier_model, &cfg.classifier, cfg.seed)
}

/// `evaluate coverage` driven by an [`EvalConfig`] with a `coverage` section.
pub fn coverage_from_config(cfg: &EvalConfig) -> Result<CoverageReport> {
    let cov = cfg.coverage.as_ref().ok_or_else(|| Error::InvalidArgument("config has no [coverage] section".into()))?;
    run_coverage_experiment(&Dataset::load(&cfg.dataset)?, cov)
}

/// `evaluate mask-iou`: up to `masks` nonempty masks from the validation and test splits.
pub fn mask_iou_from_config(cfg: &EvalConfig) -> Result<MaskReport> {
    let ds = Dataset::load(&cfg.dataset)?;
    let (models, _) = cfg.models(true)?;
    let held: Vec<&Sample> = ds
        .samples
        .iter()
        .filter(|s| s.split != Split::Train && s.mask.data().iter().any(|&v| v >= 0.5))
        .collect();
    let chosen: Vec<&Sample> = pick(&held, cfg.masks, cfg.seed).into_iter().map(|i| held[i]).collect();
    run_mask_experiment(&models, &chosen, &cfg.sampling, cfg.seed)
}

/// Stratified subset holding `fraction` of every class.
pub fn coverage_subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("subset fraction {fraction} must lie in (0, 1)")));
    }
    let mut all = ds.clone();
    for s in &mut all.samples {
        s.split = Split::Train;
    }
    all.split([fraction, 0.0, 1.0 - fraction], seed)?;
    let subset: Vec<Sample> = all.samples.into_iter().filter(|s| s.split == Split::Train).collect();
    let mut counts = [0usize; 3];
    for s in &subset {
        counts[s.class_id] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 || counts.iter().any(|&c| c == 1) {
        return Err(Error::Dataset(format!("subset counts {counts:?} too small for a stratified evaluation")));
    }
    Ok(subset)
}

/// Classifier trained on `generated` only, scored on `subset`, with a
/// label-permutation null on the same scores.
pub fn coverage_from_generated(
    subset: &[&Sample],
    generated: &[&Sample],
    model: &ClassifierConfig,
    budget: &Budget,
    permutations: usize,
    seed: u64,
) -> Result<CoverageReport> {
    let ck = train_classifier(generated, model, budget, seed)?;
    let scores = classifier_scores(&ck, subset)?;
    let labels: Vec<usize> = subset.iter().map(|s| s.class_id).collect();
    let mut report = report_from_scores(&scores, &labels)?;
    report.hashes.insert("classifier".into(), ck.content_hash()?);
    report.hashes.insert("test_set".into(), set_hash(subset));
    report.hashes.insert("generated_set".into(), set_hash(generated));
    let null = permutation_null(&scores, &labels, permutations, seed)?;
    let q = quantile(&null, NULL_QUANTILE);
    Ok(CoverageReport {
        fraction: f64::NAN,
        subset_counts: report.test_counts,
        generated: generated.len(),
        beats_null: report.auc_macro > q,
        report,
        permutations,
        null_mean: null.iter().sum::<f64>() / null.len().max(1) as f64,
        null_q997: q,
        reference: json!({
            "published_auc": 0.94,
            "published_fraction": 0.2,
            "note": "reference value from a 512x512 pretrained model on clinical data; not an acceptance bound",
        }),
    })
}

/// Trains codec and diffusion on a `fraction` subset, samples a
/// class-balanced set, trains a classifier on it alone and scores the subset.
pub fn run_coverage_experiment(ds: &Dataset, cfg: &CoverageConfig) -> Result<CoverageReport> {
    let subset = coverage_subset(ds, cfg.fraction, cfg.seed)?;
    let train_ds = as_train(subset.iter().cloned(), cfg.seed);
    let mut codec_cfg = cfg.codec.train_config(Stage::Codec, cfg.seed);
    codec_cfg.codec = cfg.codec_model.clone();
    let codec = trainer::train(&codec_cfg, TrainInputs::new(&train_ds), &mut |_| {})?.checkpoint;
    let mut diff_cfg = cfg.diffusion.train_config(Stage::Diffusion, cfg.seed);
    diff_cfg.unet = cfg.unet.clone();
    let inputs = TrainInputs { codec: Some(&codec), ..TrainInputs::new(&train_ds) };
    let diffusion = trainer::train(&diff_cfg, inputs, &mut |_| {})?.checkpoint;
    let models = Models::from_checkpoints(&codec, &diffusion, None)?;
    let generated = generate_samples(&models, cfg.per_class, &cfg.sampling, cfg.seed)?;
    let subset_refs: Vec<&Sample> = subset.iter().collect();
    let gen_refs: Vec<&Sample> = generated.iter().collect();
    let mut r =
        coverage_from_generated(&subset_refs, &gen_refs, &cfg.classifier_model, &cfg.classifier, cfg.permutations, cfg.seed)?;
    r.fraction = cfg.fraction;
    r.report.hashes.insert("codec".into(), codec.content_hash()?);
    r.report.hashes.insert("diffusion".into(), diffusion.content_hash()?);
    Ok(r)
}

/// One mask-conditioned image per sample (using the sample's class and
/// mask), compared with its own mask and with a shuffled-pair null.
pub fn run_mask_experiment(models: &Models, samples: &[&Sample], sampling: &Sampling, seed: u64) -> Result<MaskReport> {
    if models.control.is_none() {
        return Err(Error::ControlUnavailable);
    }
    let samples: Vec<&Sample> = samples.iter().copied().filter(|s| s.mask.data().iter().any(|&v| v >= 0.5)).collect();
    if samples.len() < 2 {
        return Err(Error::Dataset("mask experiment needs ≥ 2 nonempty masks".into()));
    }
    let s = models.image_size();
    let mut images: Vec<Option<Tensor>> = vec![None; samples.len()];
    for c in 0..3 {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class_id == c).collect();
        for (k, chunk) in idx.chunks(MAX_COUNT).enumerate() {
            let masks = stack_planes(chunk.iter().map(|&i| &samples[i].mask))?;
            let imgs = render(models, c, Some(&masks), &sampling.config(seed + 1000 * c as u64 + k as u64), chunk.len())?;
            for (j, &i) in chunk.iter().enumerate() {
                images[i] = Some(imgs.batch_item(j)?.reshape([1, s, s])?);
            }
        }
    }
    let images: Vec<Tensor> = images.into_iter().map(|t| t.expect("every sample rendered")).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    let per_mask = images.iter().zip(&masks).map(|(i, m)| mask_adherence(i, m)).collect::<Result<Vec<_>>>()?;
    let mean = per_mask.iter().sum::<f64>() / per_mask.len() as f64;
    let null = shuffled_pair_null(&images, &masks, seed)?;
    let mut hashes = models.hashes.clone();
    hashes.insert("mask_set".into(), set_hash(&samples));
    Ok(MaskReport {
        masks: samples.len(),
        mean_iou: mean,
        null_mean: null,
        ratio: if null > 0.0 { mean / null } else { f64::INFINITY },
        per_mask,
        hashes,
    })
}

/// Deterministic subset of `k` samples (all of them when `k ≥ len`).
pub fn pick(samples: &[&Sample], k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    PortableRng::derive(seed, 0x91C4).shuffle(&mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}
