//! Staged training: codec → diffusion → control, plus the evaluation
//! classifier.
//!
//! Every stage draws batches, timesteps, noise and condition dropout from a
//! single RNG stream whose state is stored in the checkpoint together with
//! the Adam moments, so a resumed run continues bit-identically.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointHeader, Stage};
use crate::codec::{self, CodecConfig};
use crate::control::{self, ControlModel};
use crate::data::{stack_planes, Dataset, Sample, Split};
use crate::denoiser::{self, UNetConfig};
use crate::diffusion::{q_sample_batch, NoiseSchedule, NULL_CLASS};
use crate::error::{Error, Result};
use crate::evaluator::classifier::{self, ClassifierConfig};
use crate::numerics::{adam_step, AdamState, Graph, ParamStore, PortableRng, Tensor, Var};

const RNG_TAG: u64 = 0x7EA1;

fn default_batch() -> usize {
    32
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Defaults to 1e-3 for codec and classifier, 1e-4 for diffusion and control.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dropout")]
    pub condition_dropout: f64,
    /// Dataset manifest (or directory holding one).
    #[serde(default)]
    pub dataset: PathBuf,
    #[serde(default)]
    pub out: PathBuf,
    #[serde(default)]
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub codec_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub diffusion_checkpoint: Option<PathBuf>,
    /// Line-delimited JSON loss log; defaults to `<out>.log.jsonl`.
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

impl TrainConfig {
    pub fn new(stage: Stage, steps: u64) -> Self {
        Self {
            stage,
            steps,
            batch_size: default_batch(),
            lr: None,
            seed: 0,
            condition_dropout: default_dropout(),
            dataset: PathBuf::new(),
            out: PathBuf::new(),
            resume: None,
            codec_checkpoint: None,
            diffusion_checkpoint: None,
            log: None,
            codec: CodecConfig::default(),
            unet: UNetConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.dataset);
        fix(&mut cfg.out);
        for p in [&mut cfg.resume, &mut cfg.codec_checkpoint, &mut cfg.diffusion_checkpoint, &mut cfg.log] {
            if let Some(p) = p {
                fix(p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.condition_dropout) {
            return Err(Error::InvalidArgument(format!("condition_dropout {} outside [0, 1)", self.condition_dropout)));
        }
        let lr = self.learning_rate();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr {lr} must be finite and ≥ 0")));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.stage {
            Stage::Codec | Stage::Classifier => 1e-3,
            Stage::Diffusion | Stage::Control => 1e-4,
        })
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| {
            let mut s = self.out.clone().into_os_string();
            s.push(".log.jsonl");
            s.into()
        })
    }

    /// The header's config echo: hyperparameters and the model section, no
    /// paths.
    fn echo(&self, model: serde_json::Value) -> serde_json::Value {
        json!({
            "stage": self.stage,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": self.learning_rate(),
            "seed": self.seed,
            "condition_dropout": self.condition_dropout,
            "model": model,
        })
    }
}

/// One training log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: u64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// In-memory inputs of a stage.
#[derive(Clone, Copy, Debug)]
pub struct TrainInputs<'a> {
    pub dataset: &'a Dataset,
    pub codec: Option<&'a Checkpoint>,
    pub diffusion: Option<&'a Checkpoint>,
    pub resume: Option<&'a Checkpoint>,
}

impl<'a> TrainInputs<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self { dataset, codec: None, diffusion: None, resume: None }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    /// Loss of every step run in this invocation, in order.
    pub losses: Vec<f64>,
}

fn model_section<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: Option<&str>) -> Result<T> {
    let mut v = ck.header.config.get("model");
    if let Some(k) = key {
        v = v.and_then(|m| m.get(k));
    }
    let v = v.ok_or_else(|| Error::Checkpoint(format!("{} checkpoint has no model config", ck.header.stage.name())))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("model config: {e}")))
}

/// Codec architecture recorded in a codec checkpoint.
pub fn codec_config(ck: &Checkpoint) -> Result<CodecConfig> {
    ck.expect_stage(Stage::Codec)?;
    model_section(ck, None)
}

/// U-Net architecture recorded in a diffusion or control checkpoint.
pub fn unet_config(ck: &Checkpoint) -> Result<UNetConfig> {
    match ck.header.stage {
        Stage::Diffusion => model_section(ck, None),
        Stage::Control => model_section(ck, Some("unet")),
        other => Err(Error::StageMismatch { expected: "diffusion".into(), found: other.name().into() }),
    }
}

pub fn classifier_config(ck: &Checkpoint) -> Result<ClassifierConfig> {
    ck.expect_stage(Stage::Classifier)?;
    model_section(ck, None)
}

/// SHA-256 of an image tensor's little-endian bytes.
pub fn fingerprint(image: &Tensor) -> String {
    hex::encode(Sha256::digest(image.to_le_bytes()))
}

/// Parameters of a codec checkpoint, checked against its recorded config.
pub fn load_codec(ck: &Checkpoint) -> Result<(CodecConfig, ParamStore)> {
    let cfg = codec_config(ck)?;
    ck.validate_shapes(&codec::init_codec(&cfg, 0)?)?;
    Ok((cfg, ck.params.clone()))
}

/// Parameters of a diffusion checkpoint, checked against its recorded config.
pub fn load_unet(ck: &Checkpoint) -> Result<(UNetConfig, ParamStore)> {
    ck.expect_stage(Stage::Diffusion)?;
    let cfg = unet_config(ck)?;
    ck.validate_shapes(&denoiser::init_unet(&cfg, 0)?)?;
    Ok((cfg, ck.params.clone()))
}

/// Rebuilds the controlled model from a control checkpoint and the diffusion
/// checkpoint it was trained against.
pub fn load_control(ck: &Checkpoint, diffusion: &Checkpoint) -> Result<ControlModel> {
    ck.expect_stage(Stage::Control)?;
    let diffusion_hash = diffusion.content_hash()?;
    if ck.header.parent_hash.as_deref() != Some(diffusion_hash.as_str()) {
        return Err(Error::Dependency(format!(
            "control checkpoint was trained against diffusion {}, not {diffusion_hash}",
            ck.header.parent_hash.as_deref().unwrap_or("<none>")
        )));
    }
    let (unet, base) = load_unet(diffusion)?;
    let image_size: usize = model_section(ck, Some("image_size"))?;
    let mut model = control::graft(&base, &unet, image_size, 0)?;
    ck.validate_shapes(&model.params.filtered(control::PREFIX))?;
    for p in ck.params.iter() {
        model.params.get_mut(&p.name).expect("validated").tensor = p.tensor.clone();
    }
    Ok(model)
}

fn stack_images(samples: &[&Sample], idx: &[usize]) -> Result<Tensor> {
    stack_planes(idx.iter().map(|&i| &samples[i].image))
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let item = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, idx.iter().flat_map(|&i| t.data()[i * item..(i + 1) * item].iter().copied()).collect())
}

/// Encoder means of `samples` divided by their standard deviation.
fn scaled_latents(codec_p: &ParamStore, cfg: &CodecConfig, samples: &[&Sample]) -> Result<(Tensor, f64)> {
    let images = stack_planes(samples.iter().map(|s| &s.image))?;
    let mu = codec::encode(codec_p, cfg, &images)?.mu;
    let scale = codec::latent_scale(&mu)?;
    Ok((mu.map(|v| (v as f64 / scale) as f32), scale))
}

/// Draws per-item timesteps, noise and (possibly dropped) classes, returning
/// `(z_t, eps, t, class)` for a latent batch.
fn noisy_batch(
    z0: &Tensor,
    classes: Vec<usize>,
    dropout: f64,
    schedule: &NoiseSchedule,
    rng: &mut PortableRng,
) -> Result<(Tensor, Tensor, Vec<usize>, Vec<usize>)> {
    let n = classes.len();
    let t: Vec<usize> = (0..n).map(|_| 1 + rng.below(schedule.len())).collect();
    let cls: Vec<usize> = classes.into_iter().map(|c| if rng.uniform() < dropout { NULL_CLASS } else { c }).collect();
    let eps: Tensor = rng.normal_tensor(z0.shape());
    let zt = q_sample_batch(z0, &t, &eps, schedule)?;
    Ok((zt, eps, t, cls))
}

struct Loop<'a> {
    stage: Stage,
    start: u64,
    end: u64,
    n: usize,
    batch: usize,
    sink: &'a mut dyn FnMut(&LogRecord),
}

impl Loop<'_> {
    fn run<F>(self, params: &mut ParamStore, adam: &mut AdamState, rng: &mut PortableRng, mut loss_fn: F) -> Result<Vec<f64>>
    where
        F: FnMut(&mut Graph<f32>, &ParamStore, &[usize], &mut PortableRng) -> Result<Var>,
    {
        let clock = Instant::now();
        let mut losses = Vec::new();
        for step in self.start + 1..=self.end {
            let idx: Vec<usize> = (0..self.batch).map(|_| rng.below(self.n)).collect();
            let mut g = Graph::<f32>::new();
            let loss = loss_fn(&mut g, params, &idx, rng)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                let detail = match g.first_non_finite() {
                    Some(op) => format!("loss {value}; first non-finite value produced by `{op}`"),
                    None => format!("loss {value}"),
                };
                return Err(Error::NonFiniteLoss { step: step as usize, detail });
            }
            let grads = g.backward(loss)?;
            params.accumulate_grads(&g, &grads);
            adam_step(params, adam)?;
            losses.push(value);
            (self.sink)(&LogRecord { stage: self.stage, step, loss: value, wall_ms: clock.elapsed().as_millis() as u64 });
        }
        Ok(losses)
    }
}

/// Restores optimizer, RNG and step from `resume` after checking it belongs
/// to the same stage and configuration.
fn restore(
    cfg: &TrainConfig,
    echo: &serde_json::Value,
    resume: Option<&Checkpoint>,
    trainable: &ParamStore,
) -> Result<(Option<ParamStore>, AdamState, PortableRng, u64)> {
    let fresh = || (None, AdamState::new(cfg.learning_rate()), PortableRng::derive(cfg.seed, RNG_TAG), 0);
    let Some(ck) = resume else { return Ok(fresh()) };
    ck.expect_stage(cfg.stage)?;
    let (mut a, mut b) = (ck.header.config.clone(), echo.clone());
    for v in [&mut a, &mut b] {
        if let Some(o) = v.as_object_mut() {
            o.remove("steps");
        }
    }
    if a != b {
        let differing = a
            .as_object()
            .zip(b.as_object())
            .and_then(|(x, y)| x.keys().find(|k| x.get(*k) != y.get(*k)).cloned())
            .unwrap_or_else(|| "config".into());
        return Err(Error::InvalidArgument(format!("resume checkpoint differs from config in `{differing}`")));
    }
    ck.validate_shapes(trainable)?;
    let step = ck.header.step;
    if step > cfg.steps {
        return Err(Error::InvalidArgument(format!("resume checkpoint is at step {step}, beyond steps = {}", cfg.steps)));
    }
    let adam = ck.optimizer.clone().ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?;
    let rng = ck.header.rng.as_ref().ok_or_else(|| Error::Checkpoint("resume checkpoint has no RNG state".into()))?;
    Ok((Some(ck.params.clone()), adam, PortableRng::from_state(rng), step))
}

fn overwrite(dst: &mut ParamStore, src: &ParamStore) {
    for p in src.iter() {
        if let Some(d) = dst.get_mut(&p.name) {
            d.tensor = p.tensor.clone();
        }
    }
}

fn require<'a>(ck: Option<&'a Checkpoint>, stage: Stage, needed_by: Stage) -> Result<&'a Checkpoint> {
    let ck = ck.ok_or_else(|| {
        Error::Dependency(format!("{} stage requires a {} checkpoint", needed_by.name(), stage.name()))
    })?;
    ck.expect_stage(stage)?;
    Ok(ck)
}

/// Runs one stage on in-memory inputs. Training uses the `train` split.
pub fn train(cfg: &TrainConfig, inputs: TrainInputs<'_>, sink: &mut dyn FnMut(&LogRecord)) -> Result<TrainOutput> {
    cfg.validate()?;
    let samples = inputs.dataset.subset(Split::Train);
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples in the train split".into()));
    }
    let n = samples.len();
    let dropout = cfg.condition_dropout;
    let schedule = NoiseSchedule::default_linear();
    let mut header = CheckpointHeader::new(cfg.stage, serde_json::Value::Null, cfg.seed);
    header.data_fingerprints = samples.iter().map(|s| fingerprint(&s.image)).collect();

    let (params, adam, rng, losses) = match cfg.stage {
        Stage::Codec => {
            let model = cfg.codec.clone();
            let mut params = codec::init_codec(&model, cfg.seed)?;
            header.config = cfg.echo(serde_json::to_value(&model).expect("serializable"));
            let (prev, mut adam, mut rng, start) = restore(cfg, &header.config, inputs.resume, &params)?;
            if let Some(p) = prev {
                overwrite(&mut params, &p);
            }
            let losses = Loop { stage: cfg.stage, start, end: cfg.steps, n, batch: cfg.batch_size, sink }.run(&mut params, &mut adam, &mut rng, |g, p, idx, rng| {
                let x = stack_images(&samples, idx)?;
                let noise: Tensor = rng.normal_tensor(&model.latent_shape(idx.len()));
                let xv = g.input(x);
                let nv = g.input(noise);
                let (mu, lv) = codec::encode_graph(g, p, &model, xv)?;
                let z = codec::reparameterize_graph(g, mu, lv, nv)?;
                let recon = codec::decode_graph(g, p, &model, z)?;
                codec::codec_loss_graph(g, xv, recon, mu, lv, model.kl_weight)
            })?;
            (params, adam, rng, losses)
        }
        Stage::Diffusion => {
            let codec_ck = require(inputs.codec, Stage::Codec, Stage::Diffusion)?;
            let (codec_cfg, codec_p) = load_codec(codec_ck)?;
            let model = cfg.unet.clone();
            model.validate()?;
            if model.in_channels != codec_cfg.latent_channels || model.latent_size != codec_cfg.latent_size() {
                return Err(Error::InvalidArgument(format!(
                    "unet expects [{}, {}, {}] latents, codec produces [{}, {}, {}]",
                    model.in_channels,
                    model.latent_size,
                    model.latent_size,
                    codec_cfg.latent_channels,
                    codec_cfg.latent_size(),
                    codec_cfg.latent_size()
                )));
            }
            let (z0, scale) = scaled_latents(&codec_p, &codec_cfg, &samples)?;
            header.parent_hash = Some(codec_ck.content_hash()?);
            header.latent_scale = Some(scale);
            header.config = cfg.echo(serde_json::to_value(&model).expect("serializable"));
            let mut params = denoiser::init_unet(&model, cfg.seed)?;
            let (prev, mut adam, mut rng, start) = restore(cfg, &header.config, inputs.resume, &params)?;
            if let Some(p) = prev {
                overwrite(&mut params, &p);
            }
            let losses = Loop { stage: cfg.stage, start, end: cfg.steps, n, batch: cfg.batch_size, sink }.run(&mut params, &mut adam, &mut rng, |g, p, idx, rng| {
                let z = gather_rows(&z0, idx)?;
                let classes = idx.iter().map(|&i| samples[i].class_id).collect();
                let (zt, eps, t, cls) = noisy_batch(&z, classes, dropout, &schedule, rng)?;
                let zv = g.input(zt);
                let out = denoiser::unet_graph(g, p, &model, zv, &t, &cls)?;
                let target = g.input(eps);
                g.mse_loss(out, target)
            })?;
            (params, adam, rng, losses)
        }
        Stage::Control => {
            let diff_ck = require(inputs.diffusion, Stage::Diffusion, Stage::Control)?;
            let codec_ck = require(inputs.codec, Stage::Codec, Stage::Control)?;
            let codec_hash = codec_ck.content_hash()?;
            if diff_ck.header.parent_hash.as_deref() != Some(codec_hash.as_str()) {
                return Err(Error::Dependency(format!(
                    "diffusion checkpoint was trained on codec {}, not {codec_hash}",
                    diff_ck.header.parent_hash.as_deref().unwrap_or("<none>")
                )));
            }
            if !samples.iter().any(|s| s.class_id != 0 && s.mask.data().iter().any(|&v| v > 0.0)) {
                return Err(Error::Dataset("control training needs lesion masks; every training mask is empty".into()));
            }
            let (codec_cfg, codec_p) = load_codec(codec_ck)?;
            let (unet, base) = load_unet(diff_ck)?;
            let scale = diff_ck
                .header
                .latent_scale
                .ok_or_else(|| Error::Checkpoint("diffusion checkpoint has no latent_scale".into()))?;
            let images = stack_planes(samples.iter().map(|s| &s.image))?;
            let z0 = codec::encode(&codec_p, &codec_cfg, &images)?.mu.map(|v| (v as f64 / scale) as f32);
            let masks = stack_planes(samples.iter().map(|s| &s.mask))?;
            let image_size = codec_cfg.image_size;
            let mut model = control::graft(&base, &unet, image_size, cfg.seed)?;
            let base_hash = model.base_hash();
            header.parent_hash = Some(diff_ck.content_hash()?);
            header.latent_scale = Some(scale);
            header.config = cfg.echo(json!({ "unet": unet, "image_size": image_size }));
            let branch = model.params.filtered(control::PREFIX);
            let (prev, mut adam, mut rng, start) = restore(cfg, &header.config, inputs.resume, &branch)?;
            if let Some(p) = prev {
                overwrite(&mut model.params, &p);
            }
            let losses = Loop { stage: cfg.stage, start, end: cfg.steps, n, batch: cfg.batch_size, sink }.run(&mut model.params, &mut adam, &mut rng, |g, p, idx, rng| {
                let z = gather_rows(&z0, idx)?;
                let m = gather_rows(&masks, idx)?;
                let classes = idx.iter().map(|&i| samples[i].class_id).collect();
                let (zt, eps, t, cls) = noisy_batch(&z, classes, dropout, &schedule, rng)?;
                let zv = g.input(zt);
                let mv = g.input(m);
                let out = control::controlled_graph(g, p, &unet, image_size, zv, &t, &cls, mv)?;
                let target = g.input(eps);
                g.mse_loss(out, target)
            })?;
            if model.base_hash() != base_hash {
                return Err(Error::Checkpoint("frozen base weights changed during control training".into()));
            }
            (model.params.filtered(control::PREFIX), adam, rng, losses)
        }
        Stage::Classifier => {
            let model = cfg.classifier.clone();
            let mut params = classifier::init_classifier(&model, cfg.seed)?;
            header.config = cfg.echo(serde_json::to_value(&model).expect("serializable"));
            let (prev, mut adam, mut rng, start) = restore(cfg, &header.config, inputs.resume, &params)?;
            if let Some(p) = prev {
                overwrite(&mut params, &p);
            }
            let losses = Loop { stage: cfg.stage, start, end: cfg.steps, n, batch: cfg.batch_size, sink }.run(&mut params, &mut adam, &mut rng, |g, p, idx, _| {
                let x = g.input(stack_images(&samples, idx)?);
                let labels: Vec<usize> = idx.iter().map(|&i| samples[i].class_id).collect();
                let logits = classifier::classifier_graph(g, p, &model, x)?;
                g.cross_entropy(logits, &labels)
            })?;
            (params, adam, rng, losses)
        }
    };
    header.step = cfg.steps;
    header.rng = Some(rng.state());
    let mut checkpoint = Checkpoint::new(header, params);
    checkpoint.optimizer = Some(adam);
    Ok(TrainOutput { checkpoint, losses })
}

fn load_parent(path: Option<&PathBuf>, stage: Stage, needed_by: Stage) -> Result<Option<Checkpoint>> {
    let path = path.ok_or_else(|| {
        Error::Dependency(format!(
            "{} stage requires a {} checkpoint (set {}_checkpoint)",
            needed_by.name(),
            stage.name(),
            stage.name()
        ))
    })?;
    if !path.exists() {
        return Err(Error::Dependency(format!("{} checkpoint {} does not exist", stage.name(), path.display())));
    }
    Ok(Some(Checkpoint::load(path)?.0))
}

/// File-driven stage: loads the dataset, parents and resume checkpoint named
/// in `cfg`, trains, writes the checkpoint to `cfg.out` and appends the loss
/// log. Returns the output and the checkpoint's content hash.
pub fn train_stage(cfg: &TrainConfig) -> Result<(TrainOutput, String)> {
    cfg.validate()?;
    if cfg.out.as_os_str().is_empty() {
        return Err(Error::InvalidArgument("`out` checkpoint path is required".into()));
    }
    let (codec, diffusion) = match cfg.stage {
        Stage::Codec | Stage::Classifier => (None, None),
        Stage::Diffusion => (load_parent(cfg.codec_checkpoint.as_ref(), Stage::Codec, cfg.stage)?, None),
        Stage::Control => (
            load_parent(cfg.codec_checkpoint.as_ref(), Stage::Codec, cfg.stage)?,
            load_parent(cfg.diffusion_checkpoint.as_ref(), Stage::Diffusion, cfg.stage)?,
        ),
    };
    let resume = cfg.resume.as_ref().map(|p| Checkpoint::load(p).map(|c| c.0)).transpose()?;
    let dataset = Dataset::load(&cfg.dataset)?;

    let log_path = cfg.log_path();
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut write_err = None;
    let mut sink = |r: &LogRecord| {
        let line = serde_json::to_string(r).expect("serializable");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    };
    let inputs = TrainInputs { dataset: &dataset, codec: codec.as_ref(), diffusion: diffusion.as_ref(), resume: resume.as_ref() };
    let out = train(cfg, inputs, &mut sink)?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    let hash = out.checkpoint.save(&cfg.out)?;
    Ok((out, hash))
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{busi_mix, synth_generate};

    fn small_codec() -> CodecConfig {
        CodecConfig { base_channels: 4, decoder_top_channels: 4, ..CodecConfig::default() }
    }

    fn codec_cfg(steps: u64) -> TrainConfig {
        TrainConfig { batch_size: 4, seed: 3, codec: small_codec(), ..TrainConfig::new(Stage::Codec, steps) }
    }

    fn quiet(_: &LogRecord) {}

    fn data(n: usize) -> Dataset {
        synth_generate(n, busi_mix(), 5).unwrap()
    }

    #[test]
    fn config_parsing_and_validation() {
        let cfg = TrainConfig::from_toml("stage = \"diffusion\"\nsteps = 5\n[unet]\nbase_channels = 8\n").unwrap();
        assert_eq!(cfg.stage, Stage::Diffusion);
        assert_eq!(cfg.condition_dropout, 0.1);
        assert_eq!(cfg.learning_rate(), 1e-4);
        assert_eq!(cfg.unet.base_channels, 8);
        assert!(TrainConfig::from_toml("stage = \"codec\"\nsteps = 0\n").is_err());
        assert!(TrainConfig::from_toml("stage = \"codec\"\nsteps = 2\ncondition_dropout = 1.0\n").is_err());
        assert!(TrainConfig::from_toml("stage = \"codec\"\nsteps = 2\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("stage = \"vae\"\nsteps = 2\n").is_err());
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let ds = data(12);
        let cfg = TrainConfig { lr: Some(0.0), ..codec_cfg(1) };
        let out = train(&cfg, TrainInputs::new(&ds), &mut quiet).unwrap();
        let init = codec::init_codec(&cfg.codec, cfg.seed).unwrap();
        assert_eq!(out.checkpoint.params.hash(""), init.hash(""));
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn diffusion_needs_codec() {
        let ds = data(12);
        let cfg = TrainConfig::new(Stage::Diffusion, 1);
        assert!(matches!(train(&cfg, TrainInputs::new(&ds), &mut quiet), Err(Error::Dependency(_))));
        let codec_ck = train(&codec_cfg(1), TrainInputs::new(&ds), &mut quiet).unwrap().checkpoint;
        let inputs = TrainInputs { diffusion: Some(&codec_ck), codec: Some(&codec_ck), ..TrainInputs::new(&ds) };
        let control = TrainConfig::new(Stage::Control, 1);
        assert!(matches!(train(&control, inputs, &mut quiet), Err(Error::StageMismatch { .. })));
    }

    #[test]
    fn resume_is_exact() {
        let ds = data(12);
        let straight = train(&codec_cfg(6), TrainInputs::new(&ds), &mut quiet).unwrap();
        let first = train(&codec_cfg(3), TrainInputs::new(&ds), &mut quiet).unwrap();
        let resumed = train(&codec_cfg(6), TrainInputs { resume: Some(&first.checkpoint), ..TrainInputs::new(&ds) }, &mut quiet)
            .unwrap();
        assert_eq!(resumed.losses.len(), 3);
        assert_eq!(resumed.checkpoint.to_bytes().unwrap(), straight.checkpoint.to_bytes().unwrap());
        // Zero extra steps reproduces the input checkpoint.
        let again = train(&codec_cfg(3), TrainInputs { resume: Some(&first.checkpoint), ..TrainInputs::new(&ds) }, &mut quiet)
            .unwrap();
        assert!(again.losses.is_empty());
        assert_eq!(again.checkpoint.to_bytes().unwrap(), first.checkpoint.to_bytes().unwrap());
        // Wrong stage and changed hyperparameters are refused.
        let cls = TrainConfig { batch_size: 4, ..TrainConfig::new(Stage::Classifier, 3) };
        let r = train(&cls, TrainInputs { resume: Some(&first.checkpoint), ..TrainInputs::new(&ds) }, &mut quiet);
        assert!(matches!(r, Err(Error::StageMismatch { .. })));
        let other = TrainConfig { batch_size: 5, ..codec_cfg(6) };
        let err = train(&other, TrainInputs { resume: Some(&first.checkpoint), ..TrainInputs::new(&ds) }, &mut quiet)
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch_size"), "{err}");
    }

    #[test]
    fn nan_weights_abort_with_diagnostic() {
        let ds = data(12);
        let mut ck = train(&codec_cfg(1), TrainInputs::new(&ds), &mut quiet).unwrap().checkpoint;
        ck.params.get_mut("codec.enc.out.bias").unwrap().tensor.data_mut()[0] = f32::NAN;
        let err = train(&codec_cfg(3), TrainInputs { resume: Some(&ck), ..TrainInputs::new(&ds) }, &mut quiet).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, detail } => {
                assert_eq!(step, 2);
                assert!(detail.contains("NaN"), "{detail}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn control_needs_masks_and_matching_parents() {
        let mut ds = data(120);
        let codec_ck = train(&codec_cfg(1), TrainInputs::new(&ds), &mut quiet).unwrap().checkpoint;
        let unet = UNetConfig { base_channels: 8, time_embed_dim: 16, channel_mult: vec![1, 2], ..UNetConfig::default() };
        let dcfg = TrainConfig { unet, batch_size: 2, ..TrainConfig::new(Stage::Diffusion, 1) };
        let diff = train(&dcfg, TrainInputs { codec: Some(&codec_ck), ..TrainInputs::new(&ds) }, &mut quiet)
            .unwrap()
            .checkpoint;
        assert_eq!(diff.header.parent_hash, Some(codec_ck.content_hash().unwrap()));
        assert!(diff.header.latent_scale.unwrap() > 0.0);

        let ccfg = TrainConfig { batch_size: 2, ..TrainConfig::new(Stage::Control, 2) };
        let inputs = TrainInputs { codec: Some(&codec_ck), diffusion: Some(&diff), ..TrainInputs::new(&ds) };
        let out = train(&ccfg, inputs, &mut quiet).unwrap();
        assert!(out.checkpoint.params.iter().all(|p| p.name.starts_with("control.")));
        let model = load_control(&out.checkpoint, &diff).unwrap();
        assert_eq!(model.base_hash(), diff.params.hash(denoiser::PREFIX));

        let other_codec = train(&TrainConfig { seed: 9, ..codec_cfg(1) }, TrainInputs::new(&ds), &mut quiet)
            .unwrap()
            .checkpoint;
        let bad = TrainInputs { codec: Some(&other_codec), diffusion: Some(&diff), ..TrainInputs::new(&ds) };
        assert!(matches!(train(&ccfg, bad, &mut quiet), Err(Error::Dependency(_))));

        for s in &mut ds.samples {
            s.mask = Tensor::zeros(s.mask.shape().to_vec());
        }
        let inputs = TrainInputs { codec: Some(&codec_ck), diffusion: Some(&diff), ..TrainInputs::new(&ds) };
        assert!(matches!(train(&ccfg, inputs, &mut quiet), Err(Error::Dataset(_))));
    }

    #[test]
    fn file_driven_stage_writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ds = data(12);
        ds.save(&dir.path().join("data")).unwrap();
        let text = "stage = \"codec\"\nsteps = 2\nbatch_size = 2\nseed = 1\ndataset = \"data\"\nout = \"ck/codec.sdck\"\n\
                    [codec]\nbase_channels = 4\ndecoder_top_channels = 4\n";
        let path = dir.path().join("train.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = TrainConfig::load(&path).unwrap();
        let (out, hash) = train_stage(&cfg).unwrap();
        let (back, h2) = Checkpoint::load(&cfg.out).unwrap();
        assert_eq!(hash, h2);
        assert_eq!(back.params.hash(""), out.checkpoint.params.hash(""));
        let log = read_log(&cfg.log_path()).unwrap();
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(log[0].loss, out.losses[0]);

        let diff = TrainConfig { stage: Stage::Diffusion, codec_checkpoint: Some(dir.path().join("missing")), ..cfg };
        assert!(matches!(train_stage(&diff), Err(Error::Dependency(_))));
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[4.0, 2.0, 0.0, 2.0], 2), vec![4.0, 3.0, 1.0, 1.0]);
    }
}
