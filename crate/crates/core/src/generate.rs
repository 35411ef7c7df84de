//! Request-driven sampling shared by the CLI and the HTTP service.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{self, CodecConfig};
use crate::control::ControlModel;
use crate::data::{prompt_to_class, CLASS_NAMES};
use crate::denoiser::{UNetConfig, UNetDenoiser};
use crate::diffusion::{sample, NoiseSchedule, SamplerConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::imaging;
use crate::numerics::{ParamStore, Tensor};
use crate::trainer;

pub const MAX_COUNT: usize = 16;

fn default_steps() -> usize {
    50
}

fn default_guidance() -> f64 {
    3.0
}

fn default_count() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    /// Free text naming exactly one class, e.g. "Ultrasound image of a benign breast".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    /// Base64 PNG, 64×64, binarized at half intensity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_count")]
    pub count: usize,
}

impl Default for GenerationRequest {
    fn default() -> Self {
        Self {
            prompt: None,
            class_id: None,
            mask: None,
            steps: default_steps(),
            guidance: default_guidance(),
            eta: 0.0,
            seed: 0,
            count: default_count(),
        }
    }
}

impl GenerationRequest {
    /// Class named by `class_id` or `prompt`; both may be given if they agree.
    pub fn resolve_class(&self) -> Result<usize> {
        let from_prompt = match &self.prompt {
            Some(p) => Some(prompt_to_class(p).map_err(|e| Error::field("prompt", e.to_string()))?),
            None => None,
        };
        if let Some(c) = self.class_id {
            if c >= CLASS_NAMES.len() {
                return Err(Error::field("class_id", format!("{c} is not in [0, {})", CLASS_NAMES.len())));
            }
            if from_prompt.is_some_and(|p| p != c) {
                return Err(Error::field("class_id", "disagrees with the class named in `prompt`"));
            }
            return Ok(c);
        }
        from_prompt.ok_or_else(|| Error::field("prompt", "either `prompt` or `class_id` is required"))
    }

    /// Decoded `[1, 1, 64, 64]` mask, if any.
    pub fn decode_mask(&self, image_size: usize) -> Result<Option<Tensor>> {
        let Some(b64) = &self.mask else { return Ok(None) };
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64.trim())
            .map_err(|e| Error::field("mask", format!("not valid base64: {e}")))?;
        let img = imaging::decode_gray(&bytes).map_err(|e| Error::field("mask", format!("not a decodable PNG: {e}")))?;
        if img.dimensions() != (image_size as u32, image_size as u32) {
            return Err(Error::field(
                "mask",
                format!("must be {image_size}×{image_size}, got {}×{}", img.width(), img.height()),
            ));
        }
        Ok(Some(imaging::mask_from_gray(&img).reshape([1, 1, image_size, image_size])?))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_COUNT).contains(&self.count) {
            return Err(Error::field("count", format!("{} is not in [1, {MAX_COUNT}]", self.count)));
        }
        let t = crate::diffusion::DEFAULT_T;
        if !(1..=t).contains(&self.steps) {
            return Err(Error::field("steps", format!("{} is not in [1, {t}]", self.steps)));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::field("guidance", "must be finite and ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::field("eta", "must lie in [0, 1]"));
        }
        self.resolve_class().map(|_| ())
    }
}

/// Codec, base U-Net and optional control branch, ready for sampling.
#[derive(Clone, Debug)]
pub struct Models {
    pub codec: CodecConfig,
    pub codec_params: ParamStore,
    pub unet: UNetConfig,
    pub unet_params: ParamStore,
    pub latent_scale: f64,
    pub control: Option<ControlModel>,
    /// Content hash per loaded checkpoint (`codec`, `diffusion`, `control`).
    pub hashes: BTreeMap<String, String>,
}

impl Models {
    /// Assembles models from checkpoints, checking the parent-hash chain.
    pub fn from_checkpoints(codec_ck: &Checkpoint, diffusion: &Checkpoint, control: Option<&Checkpoint>) -> Result<Self> {
        let (codec, codec_params) = trainer::load_codec(codec_ck)?;
        let (unet, unet_params) = trainer::load_unet(diffusion)?;
        let codec_hash = codec_ck.content_hash()?;
        if diffusion.header.parent_hash.as_deref() != Some(codec_hash.as_str()) {
            return Err(Error::Dependency(format!(
                "diffusion checkpoint was trained on codec {}, not {codec_hash}",
                diffusion.header.parent_hash.as_deref().unwrap_or("<none>")
            )));
        }
        let latent_scale = diffusion
            .header
            .latent_scale
            .ok_or_else(|| Error::Checkpoint("diffusion checkpoint has no latent_scale".into()))?;
        let mut hashes = BTreeMap::new();
        hashes.insert("codec".to_string(), codec_hash);
        hashes.insert("diffusion".to_string(), diffusion.content_hash()?);
        let control = match control {
            Some(c) => {
                hashes.insert("control".to_string(), c.content_hash()?);
                Some(trainer::load_control(c, diffusion)?)
            }
            None => None,
        };
        Ok(Self { codec, codec_params, unet, unet_params, latent_scale, control, hashes })
    }

    pub fn load(codec: &Path, diffusion: &Path, control: Option<&Path>) -> Result<Self> {
        let c = Checkpoint::load(codec)?.0;
        let d = Checkpoint::load(diffusion)?.0;
        let k = control.map(Checkpoint::load).transpose()?.map(|x| x.0);
        Self::from_checkpoints(&c, &d, k.as_ref())
    }

    pub fn image_size(&self) -> usize {
        self.codec.image_size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub sampling_ms: u64,
    pub decode_ms: u64,
    pub total_ms: u64,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub class_id: usize,
    pub seed_used: u64,
    /// `[1, 1, S, S]` images in `[−1, 1]`.
    pub images: Vec<Tensor>,
    pub pngs: Vec<Vec<u8>>,
    pub timings: Timings,
}

/// Samples `req.count` images. Output bytes depend only on the request and
/// the loaded checkpoints.
pub fn generate(models: &Models, req: &GenerationRequest) -> Result<Generation> {
    req.validate()?;
    let class_id = req.resolve_class()?;
    let mask = req.decode_mask(models.image_size())?;
    if mask.is_some() && models.control.is_none() {
        return Err(Error::ControlUnavailable);
    }
    let clock = Instant::now();
    let sampler = SamplerConfig {
        kind: SamplerKind::Ddim,
        steps: req.steps,
        eta: req.eta,
        guidance_scale: req.guidance,
        seed: req.seed,
    };
    let (decoded, sampling_ms) = render_timed(models, class_id, mask.as_ref(), &sampler, req.count)?;
    let s = models.image_size();
    let mut images = Vec::with_capacity(req.count);
    let mut pngs = Vec::with_capacity(req.count);
    for i in 0..req.count {
        let img = decoded.batch_item(i)?;
        pngs.push(imaging::encode_png(&imaging::to_gray(&img, s, s)?)?);
        images.push(img);
    }
    let total_ms = clock.elapsed().as_millis() as u64;
    Ok(Generation {
        class_id,
        seed_used: req.seed,
        images,
        pngs,
        timings: Timings { sampling_ms, decode_ms: total_ms - sampling_ms, total_ms },
    })
}

/// Samples `count` images of `class_id` as a `[count, 1, S, S]` tensor in
/// `[−1, 1]`. `mask` is `[1, 1, S, S]` (shared) or `[count, 1, S, S]`.
pub fn render(models: &Models, class_id: usize, mask: Option<&Tensor>, sampler: &SamplerConfig, count: usize) -> Result<Tensor> {
    render_timed(models, class_id, mask, sampler, count).map(|r| r.0)
}

fn render_timed(
    models: &Models,
    class_id: usize,
    mask: Option<&Tensor>,
    sampler: &SamplerConfig,
    count: usize,
) -> Result<(Tensor, u64)> {
    let clock = Instant::now();
    let schedule = NoiseSchedule::default_linear();
    let shape = models.codec.latent_shape(count);
    let z = match (mask, &models.control) {
        (Some(m), Some(ctl)) => sample(&mut &*ctl, &schedule, sampler, class_id, Some(m), &shape)?,
        (Some(_), None) => return Err(Error::ControlUnavailable),
        (None, _) => {
            let mut d = UNetDenoiser { params: &models.unet_params, cfg: &models.unet };
            sample(&mut d, &schedule, sampler, class_id, None, &shape)?
        }
    };
    let sampling_ms = clock.elapsed().as_millis() as u64;
    let z = z.map(|v| (v as f64 * models.latent_scale) as f32);
    Ok((codec::decode(&models.codec_params, &models.codec, &z)?, sampling_ms))
}

/// Metadata written next to generated PNGs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub request: GenerationRequest,
    pub class_id: usize,
    pub class_name: String,
    pub seed_used: u64,
    pub files: Vec<String>,
    pub checkpoints: BTreeMap<String, String>,
}

/// Writes `sample_<i>.png` files and `metadata.json` into `dir`.
pub fn write_generation(dir: &Path, models: &Models, req: &GenerationRequest, out: &Generation) -> Result<GenerationRecord> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(out.pngs.len());
    for (i, png) in out.pngs.iter().enumerate() {
        let name = format!("sample_{i}.png");
        let path = dir.join(&name);
        std::fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    let record = GenerationRecord {
        request: req.clone(),
        class_id: out.class_id,
        class_name: CLASS_NAMES[out.class_id].to_string(),
        seed_used: out.seed_used,
        files,
        checkpoints: models.hashes.clone(),
    };
    let path = dir.join("metadata.json");
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(record)
}
