//! Convolutional VAE between 64×64×1 images and 4×8×8 latents.
//!
//! Encoder: `log2(down_factor)` stride-2 blocks (4×4 kernel), each
//! `conv → norm → silu → conv → norm → silu`, then a 1×1 conv producing
//! μ and log σ². The decoder mirrors it with nearest upsampling and ends
//! in `tanh`. All weights live under the `codec.` prefix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, conv_params, DOWN_KERNEL};
use crate::numerics::{init, Elem, Graph, ParamStore, PortableRng, Tensor, Var};

pub const PREFIX: &str = "codec";
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
const INFER_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub latent_channels: usize,
    pub down_factor: usize,
    pub base_channels: usize,
    /// Width of the last decoder block, which runs at full resolution.
    pub decoder_top_channels: usize,
    pub kl_weight: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            latent_channels: 4,
            down_factor: 8,
            base_channels: 32,
            decoder_top_channels: 8,
            kl_weight: 1e-4,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.down_factor.is_power_of_two() || self.down_factor < 2 {
            return Err(Error::InvalidArgument(format!("down_factor {} is not a power of 2 ≥ 2", self.down_factor)));
        }
        if self.image_size == 0 || self.image_size % self.down_factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} not divisible by down_factor {}",
                self.image_size, self.down_factor
            )));
        }
        if self.in_channels == 0 || self.latent_channels == 0 || self.base_channels == 0 || self.decoder_top_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("kl_weight {} must be finite and ≥ 0", self.kl_weight)));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.down_factor.trailing_zeros() as usize
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.down_factor
    }

    pub fn latent_shape(&self, n: usize) -> [usize; 4] {
        [n, self.latent_channels, self.latent_size(), self.latent_size()]
    }

    /// Encoder width after down block `l`; the deepest block is twice as wide.
    pub fn level_channels(&self, l: usize) -> usize {
        if l + 1 == self.levels() && self.levels() > 1 {
            2 * self.base_channels
        } else {
            self.base_channels
        }
    }

    /// Output width of decoder block `l` (block 0 produces full resolution).
    fn decoder_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.decoder_top_channels
        } else {
            self.level_channels(l - 1)
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let norm = |c: usize| 2 * c;
        let mut n = 0;
        let mut cin = self.in_channels;
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            n += conv_params(cin, c, DOWN_KERNEL) + norm(c) + conv_params(c, c, 3) + norm(c);
            cin = c;
        }
        n += conv_params(cin, 2 * self.latent_channels, 1);
        n += conv_params(self.latent_channels, cin, 3);
        for l in (0..self.levels()).rev() {
            let c = self.decoder_channels(l);
            n += conv_params(cin, c, 3) + norm(c) + conv_params(c, c, 3) + norm(c);
            cin = c;
        }
        n + conv_params(cin, self.in_channels, 3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl LatentPosterior {
    pub fn len(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn init_codec(cfg: &CodecConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = PortableRng::derive(seed, 0xC0DEC);
    let mut p = ParamStore::new();
    let mut cin = cfg.in_channels;
    for l in 0..cfg.levels() {
        let c = cfg.level_channels(l);
        layers::init_conv_norm(&mut p, &format!("{PREFIX}.enc.{l}.a"), cin, c, DOWN_KERNEL, &mut rng)?;
        layers::init_conv_norm(&mut p, &format!("{PREFIX}.enc.{l}.b"), c, c, 3, &mut rng)?;
        cin = c;
    }
    init::conv(&mut p, &format!("{PREFIX}.enc.out"), cin, 2 * cfg.latent_channels, 1, &mut rng)?;
    init::conv(&mut p, &format!("{PREFIX}.dec.in"), cfg.latent_channels, cin, 3, &mut rng)?;
    for l in (0..cfg.levels()).rev() {
        let c = cfg.decoder_channels(l);
        layers::init_conv_norm(&mut p, &format!("{PREFIX}.dec.{l}.a"), cin, c, 3, &mut rng)?;
        layers::init_conv_norm(&mut p, &format!("{PREFIX}.dec.{l}.b"), c, c, 3, &mut rng)?;
        cin = c;
    }
    init::conv(&mut p, &format!("{PREFIX}.dec.out"), cin, cfg.in_channels, 3, &mut rng)?;
    Ok(p)
}

fn check_input(shape: &[usize], c: usize, size: usize, what: &str) -> Result<()> {
    if shape.len() != 4 || shape[1] != c || shape[2] != size || shape[3] != size {
        return Err(Error::Shape(format!("{what}: expected [N,{c},{size},{size}], got {shape:?}")));
    }
    Ok(())
}

/// Encoder graph; returns `(μ, clamped log σ²)`.
pub fn encode_graph<T: Elem>(g: &mut Graph<T>, p: &ParamStore, cfg: &CodecConfig, x: Var) -> Result<(Var, Var)> {
    check_input(g.shape(x), cfg.in_channels, cfg.image_size, "encode")?;
    let mut h = x;
    for l in 0..cfg.levels() {
        h = layers::conv_norm_act(g, p, &format!("{PREFIX}.enc.{l}.a"), h, 2)?;
        h = layers::conv_norm_act(g, p, &format!("{PREFIX}.enc.{l}.b"), h, 1)?;
    }
    let out = layers::conv(g, p, &format!("{PREFIX}.enc.out"), h, 1)?;
    let mu = g.slice_channels(out, 0, cfg.latent_channels)?;
    let lv = g.slice_channels(out, cfg.latent_channels, cfg.latent_channels)?;
    let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    Ok((mu, lv))
}

pub fn decode_graph<T: Elem>(g: &mut Graph<T>, p: &ParamStore, cfg: &CodecConfig, z: Var) -> Result<Var> {
    check_input(g.shape(z), cfg.latent_channels, cfg.latent_size(), "decode")?;
    let mut h = layers::conv(g, p, &format!("{PREFIX}.dec.in"), z, 1)?;
    for l in (0..cfg.levels()).rev() {
        h = g.upsample2x(h)?;
        h = layers::conv_norm_act(g, p, &format!("{PREFIX}.dec.{l}.a"), h, 1)?;
        h = layers::conv_norm_act(g, p, &format!("{PREFIX}.dec.{l}.b"), h, 1)?;
    }
    let h = layers::conv(g, p, &format!("{PREFIX}.dec.out"), h, 1)?;
    Ok(g.tanh(h))
}

/// `z = μ + exp(logvar / 2) · noise`, differentiable in μ and logvar.
pub fn reparameterize_graph<T: Elem>(g: &mut Graph<T>, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let s = g.mul(std, noise)?;
    g.add(mu, s)
}

/// `mse(recon, image) + kl_weight · kl(μ, logvar)`.
pub fn codec_loss_graph<T: Elem>(
    g: &mut Graph<T>,
    image: Var,
    recon: Var,
    mu: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<Var> {
    let rec = g.mse_loss(recon, image)?;
    let kl = g.kl_normal(mu, logvar)?;
    let kl = g.scale(kl, kl_weight);
    g.add(rec, kl)
}

fn chunked(x: &Tensor, mut f: impl FnMut(Tensor) -> Result<Vec<Tensor>>) -> Result<Vec<Tensor>> {
    let n = x.shape()[0];
    let item = x.numel() / n.max(1);
    let mut parts: Vec<Vec<Tensor>> = Vec::new();
    for start in (0..n).step_by(INFER_CHUNK) {
        let len = INFER_CHUNK.min(n - start);
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let chunk = Tensor::new(shape, x.data()[start * item..(start + len) * item].to_vec())?;
        parts.push(f(chunk)?);
    }
    let outputs = parts.first().map_or(0, Vec::len);
    (0..outputs)
        .map(|k| {
            let pieces: Vec<&Tensor> = parts.iter().map(|p| &p[k]).collect();
            concat_batch(&pieces)
        })
        .collect()
}

fn concat_batch(pieces: &[&Tensor]) -> Result<Tensor> {
    let mut shape = pieces[0].shape().to_vec();
    shape[0] = pieces.iter().map(|t| t.shape()[0]).sum();
    let data = pieces.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

pub fn encode(p: &ParamStore, cfg: &CodecConfig, image: &Tensor) -> Result<LatentPosterior> {
    check_input(image.shape(), cfg.in_channels, cfg.image_size, "encode")?;
    let out = chunked(image, |x| {
        let mut g = Graph::<f32>::new();
        let x = g.input(x);
        let (mu, lv) = encode_graph(&mut g, p, cfg, x)?;
        Ok(vec![g.value(mu).clone(), g.value(lv).clone()])
    })?;
    let mut it = out.into_iter();
    Ok(LatentPosterior { mu: it.next().expect("mu"), logvar: it.next().expect("logvar") })
}

pub fn decode(p: &ParamStore, cfg: &CodecConfig, z: &Tensor) -> Result<Tensor> {
    check_input(z.shape(), cfg.latent_channels, cfg.latent_size(), "decode")?;
    let out = chunked(z, |z| {
        let mut g = Graph::<f32>::new();
        let z = g.input(z);
        let x = decode_graph(&mut g, p, cfg, z)?;
        Ok(vec![g.value(x).clone()])
    })?;
    Ok(out.into_iter().next().expect("decoded"))
}

pub fn reparameterize(post: &LatentPosterior, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != post.mu.shape() || post.logvar.shape() != post.mu.shape() {
        return Err(Error::Shape(format!(
            "reparameterize: noise {:?} vs mu {:?}",
            noise.shape(),
            post.mu.shape()
        )));
    }
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .zip(noise.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(post.mu.shape().to_vec(), data)
}

pub fn codec_loss(image: &Tensor, recon: &Tensor, post: &LatentPosterior, kl_weight: f64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.input(image.cast());
    let r = g.input(recon.cast());
    let mu = g.input(post.mu.cast());
    let lv = g.input(post.logvar.cast());
    let loss = codec_loss_graph(&mut g, x, r, mu, lv, kl_weight)?;
    Ok(g.value(loss).data()[0])
}

/// Population standard deviation of a batch of latents `[N, C, H, W]`.
pub fn latent_scale(latents: &Tensor) -> Result<f64> {
    let n = latents.shape().first().copied().unwrap_or(0);
    if latents.shape().len() != 4 || n == 0 {
        return Err(Error::InvalidArgument("latent_scale: no latents".into()));
    }
    if n < 100 {
        return Err(Error::InvalidArgument(format!("latent_scale needs ≥ 100 latents, got {n}")));
    }
    let len = latents.numel() as f64;
    let mean = latents.data().iter().map(|&v| v as f64).sum::<f64>() / len;
    let var = latents.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len;
    let std = var.sqrt();
    if !(std > 1e-12 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("latent_scale: degenerate variance {var}")));
    }
    Ok(std)
}

/// Peak signal-to-noise ratio for images in `[−1, 1]` (peak-to-peak 2).
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("psnr: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(10.0 * (4.0 / mse.max(1e-20)).log10())
}
