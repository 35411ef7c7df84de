//! Class-conditional U-Net ε-predictor.
//!
//! The timestep goes through a sinusoidal encoding and a two-layer MLP; the
//! class embedding row is added to it and the sum modulates every residual
//! block. Parameter names are rooted at a prefix (`unet` for the base model)
//! so the control branch can instantiate an encoder copy under its own
//! prefix.

use serde::{Deserialize, Serialize};

use crate::diffusion::DEFAULT_T;
use crate::error::{Error, Result};
use crate::layers::{self, conv_params, DOWN_KERNEL};
use crate::numerics::{init, Elem, Graph, ParamStore, PortableRng, Tensor, Var};

pub const PREFIX: &str = "unet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub num_classes: usize,
    pub attention_at_bottleneck: bool,
    pub latent_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            res_blocks_per_level: 2,
            time_embed_dim: 128,
            num_classes: 4,
            attention_at_bottleneck: true,
            latent_size: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 || self.channel_mult.contains(&0) {
            return Err(Error::InvalidArgument("channel_mult must be non-empty and positive".into()));
        }
        if self.latent_size == 0 || self.latent_size % (1 << (levels - 1)) != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent size {} not divisible by 2^{}",
                self.latent_size,
                levels - 1
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("time_embed_dim {} must be even", self.time_embed_dim)));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.num_classes == 0 || self.res_blocks_per_level == 0 {
            return Err(Error::InvalidArgument("unet sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_mult[l]
    }

    /// Channel count of every skip activation, in push order.
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut out = vec![self.level_channels(0)];
        for l in 0..self.levels() {
            for _ in 0..self.res_blocks_per_level {
                out.push(self.level_channels(l));
            }
            if l + 1 < self.levels() {
                out.push(self.level_channels(l));
            }
        }
        out
    }

    pub fn mid_channels(&self) -> usize {
        self.level_channels(self.levels() - 1)
    }
}

/// Transformer-style timestep encoding: `out[2i] = sin(t·f_i)`,
/// `out[2i+1] = cos(t·f_i)` with `f_i = 10000^(−2i/dim)`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("sinusoidal_embed: dim {dim} must be even and positive")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let a = t as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Learned class embedding; the last row is the null token.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub class_table: Tensor,
}

impl ConditionEmbedding {
    pub fn from_params(p: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self { class_table: p.tensor(&format!("{prefix}.class_table"))?.clone() })
    }

    pub fn null_row(&self) -> usize {
        self.class_table.shape()[0] - 1
    }
}

fn init_res(p: &mut ParamStore, name: &str, cin: usize, cout: usize, ted: usize, rng: &mut PortableRng) -> Result<()> {
    init::norm(p, &format!("{name}.norm1"), cin)?;
    init::conv(p, &format!("{name}.conv1"), cin, cout, 3, rng)?;
    init::linear(p, &format!("{name}.emb"), ted, cout, rng)?;
    init::norm(p, &format!("{name}.norm2"), cout)?;
    init::conv(p, &format!("{name}.conv2"), cout, cout, 3, rng)?;
    if cin != cout {
        init::conv(p, &format!("{name}.skip"), cin, cout, 1, rng)?;
    }
    Ok(())
}

fn init_attn(p: &mut ParamStore, name: &str, c: usize, rng: &mut PortableRng) -> Result<()> {
    init::norm(p, &format!("{name}.norm"), c)?;
    for part in ["q", "k", "v", "proj"] {
        init::conv(p, &format!("{name}.{part}"), c, c, 1, rng)?;
    }
    Ok(())
}

/// Initializes the embedding, input conv, down path and bottleneck.
fn init_encoder(p: &mut ParamStore, cfg: &UNetConfig, prefix: &str, rng: &mut PortableRng) -> Result<()> {
    let ted = cfg.time_embed_dim;
    init::linear(p, &format!("{prefix}.time.0"), ted, ted, rng)?;
    init::linear(p, &format!("{prefix}.time.1"), ted, ted, rng)?;
    p.insert(format!("{prefix}.class_table"), rng.normal_tensor(&[cfg.num_classes, ted]))?;
    init::conv(p, &format!("{prefix}.conv_in"), cfg.in_channels, cfg.level_channels(0), 3, rng)?;
    let mut ch = cfg.level_channels(0);
    for l in 0..cfg.levels() {
        let c = cfg.level_channels(l);
        for i in 0..cfg.res_blocks_per_level {
            init_res(p, &format!("{prefix}.down.{l}.res.{i}"), ch, c, ted, rng)?;
            ch = c;
        }
        if l + 1 < cfg.levels() {
            init::conv(p, &format!("{prefix}.down.{l}.downsample"), c, c, DOWN_KERNEL, rng)?;
        }
    }
    init_res(p, &format!("{prefix}.mid.res.0"), ch, ch, ted, rng)?;
    if cfg.attention_at_bottleneck {
        init_attn(p, &format!("{prefix}.mid.attn"), ch, rng)?;
    }
    init_res(p, &format!("{prefix}.mid.res.1"), ch, ch, ted, rng)
}

/// Fresh U-Net weights under the `unet.` prefix. Fan-in Kaiming-uniform
/// everywhere except the output conv, which starts at zero.
pub fn init_unet(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = PortableRng::derive(seed, 0x0417);
    let mut p = ParamStore::new();
    init_encoder(&mut p, cfg, PREFIX, &mut rng)?;
    let ted = cfg.time_embed_dim;
    let mut skips = cfg.skip_channels();
    let mut ch = cfg.mid_channels();
    for l in (0..cfg.levels()).rev() {
        let c = cfg.level_channels(l);
        for i in 0..=cfg.res_blocks_per_level {
            let s = skips.pop().expect("skip");
            init_res(&mut p, &format!("{PREFIX}.up.{l}.res.{i}"), ch + s, c, ted, &mut rng)?;
            ch = c;
        }
        if l > 0 {
            init::conv(&mut p, &format!("{PREFIX}.up.{l}.upsample"), c, c, 3, &mut rng)?;
        }
    }
    init::norm(&mut p, &format!("{PREFIX}.out.norm"), ch)?;
    init::zero_conv(&mut p, &format!("{PREFIX}.out.conv"), ch, cfg.in_channels, 3)?;
    Ok(p)
}

/// Copies the embedding, input conv, down path and bottleneck of the model
/// at `from` into fresh names under `to`.
pub fn copy_encoder(src: &ParamStore, cfg: &UNetConfig, from: &str, to: &str) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for param in src.iter() {
        if let Some(rest) = param.name.strip_prefix(from).and_then(|r| r.strip_prefix('.')) {
            if is_encoder_param(rest) {
                out.insert(format!("{to}.{rest}"), param.tensor.clone())?;
            }
        }
    }
    let expected = encoder_param_names(cfg);
    if out.len() != expected {
        return Err(Error::Checkpoint(format!(
            "base model under '{from}' has {} encoder tensors, expected {expected}",
            out.len()
        )));
    }
    Ok(out)
}

fn is_encoder_param(rest: &str) -> bool {
    ["time.", "class_table", "conv_in.", "down.", "mid."].iter().any(|p| rest.starts_with(p))
}

fn encoder_param_names(cfg: &UNetConfig) -> usize {
    let mut p = ParamStore::new();
    let mut rng = PortableRng::new(0);
    init_encoder(&mut p, cfg, "x", &mut rng).expect("encoder init");
    p.len()
}

/// Activations handed from the encoder to the decoder.
pub struct Features {
    pub skips: Vec<Var>,
    pub mid: Var,
}

fn check_conditions(cfg: &UNetConfig, n: usize, t: &[usize], class_id: &[usize]) -> Result<()> {
    if t.len() != n || class_id.len() != n {
        return Err(Error::Shape(format!(
            "unet: batch {n} but {} timesteps and {} class ids",
            t.len(),
            class_id.len()
        )));
    }
    if let Some(&bad) = t.iter().find(|&&t| t == 0 || t > DEFAULT_T) {
        return Err(Error::InvalidArgument(format!("timestep {bad} outside [1, {DEFAULT_T}]")));
    }
    if let Some(&bad) = class_id.iter().find(|&&c| c >= cfg.num_classes) {
        return Err(Error::InvalidArgument(format!("class id {bad} outside [0, {})", cfg.num_classes)));
    }
    Ok(())
}

/// `silu(mlp(sinusoidal(t)) + class_table[class])`, shape `[N, time_embed_dim]`.
pub fn embed<T: Elem>(
    g: &mut Graph<T>,
    p: &ParamStore,
    cfg: &UNetConfig,
    prefix: &str,
    t: &[usize],
    class_id: &[usize],
) -> Result<Var> {
    let ted = cfg.time_embed_dim;
    let mut data = Vec::with_capacity(t.len() * ted);
    for &ti in t {
        data.extend(sinusoidal_embed(ti, ted)?.into_iter().map(T::of));
    }
    let s = g.input(Tensor::new([t.len(), ted], data)?);
    let h = layers::linear(g, p, &format!("{prefix}.time.0"), s)?;
    let h = g.silu(h);
    let h = layers::linear(g, p, &format!("{prefix}.time.1"), h)?;
    let table = g.param(p, &format!("{prefix}.class_table"))?;
    let c = g.gather(table, class_id)?;
    let e = g.add(h, c)?;
    Ok(g.silu(e))
}

fn res_block<T: Elem>(g: &mut Graph<T>, p: &ParamStore, name: &str, x: Var, emb: Var) -> Result<Var> {
    let h = layers::norm(g, p, &format!("{name}.norm1"), x)?;
    let h = g.silu(h);
    let h = layers::conv(g, p, &format!("{name}.conv1"), h, 1)?;
    let e = layers::linear(g, p, &format!("{name}.emb"), emb)?;
    let h = g.add_channel(h, e)?;
    let h = layers::norm(g, p, &format!("{name}.norm2"), h)?;
    let h = g.silu(h);
    let h = layers::conv(g, p, &format!("{name}.conv2"), h, 1)?;
    let s = if p.contains(&format!("{name}.skip.weight")) {
        layers::conv(g, p, &format!("{name}.skip"), x, 1)?
    } else {
        x
    };
    g.add(h, s)
}

fn attention<T: Elem>(g: &mut Graph<T>, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let (n, c, h, w) = match *g.shape(x) {
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(Error::Shape(format!("attention input {s:?}"))),
    };
    let hn = layers::norm(g, p, &format!("{name}.norm"), x)?;
    let mut tokens = [hn; 3];
    for (slot, part) in tokens.iter_mut().zip(["q", "k", "v"]) {
        let y = layers::conv(g, p, &format!("{name}.{part}"), hn, 1)?;
        let y = g.reshape(y, &[n, c, h * w])?;
        *slot = g.swap_last2(y)?;
    }
    let a = g.attention_single_head(tokens[0], tokens[1], tokens[2])?;
    let a = g.swap_last2(a)?;
    let a = g.reshape(a, &[n, c, h, w])?;
    let a = layers::conv(g, p, &format!("{name}.proj"), a, 1)?;
    g.add(x, a)
}

/// Input conv, down path and bottleneck. `hint` is added to the input conv
/// output when present.
pub fn encoder<T: Elem>(
    g: &mut Graph<T>,
    p: &ParamStore,
    cfg: &UNetConfig,
    prefix: &str,
    x: Var,
    emb: Var,
    hint: Option<Var>,
) -> Result<Features> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.latent_size || s[3] != cfg.latent_size {
        return Err(Error::Shape(format!(
            "unet: expected [N,{},{},{}], got {s:?}",
            cfg.in_channels, cfg.latent_size, cfg.latent_size
        )));
    }
    let mut h = layers::conv(g, p, &format!("{prefix}.conv_in"), x, 1)?;
    if let Some(hint) = hint {
        h = g.add(h, hint)?;
    }
    let mut skips = vec![h];
    for l in 0..cfg.levels() {
        for i in 0..cfg.res_blocks_per_level {
            h = res_block(g, p, &format!("{prefix}.down.{l}.res.{i}"), h, emb)?;
            skips.push(h);
        }
        if l + 1 < cfg.levels() {
            h = layers::conv(g, p, &format!("{prefix}.down.{l}.downsample"), h, 2)?;
            skips.push(h);
        }
    }
    h = res_block(g, p, &format!("{prefix}.mid.res.0"), h, emb)?;
    if cfg.attention_at_bottleneck {
        h = attention(g, p, &format!("{prefix}.mid.attn"), h)?;
    }
    h = res_block(g, p, &format!("{prefix}.mid.res.1"), h, emb)?;
    Ok(Features { skips, mid: h })
}

pub fn decoder<T: Elem>(
    g: &mut Graph<T>,
    p: &ParamStore,
    cfg: &UNetConfig,
    prefix: &str,
    feats: Features,
    emb: Var,
) -> Result<Var> {
    let Features { mut skips, mid } = feats;
    let mut h = mid;
    for l in (0..cfg.levels()).rev() {
        for i in 0..=cfg.res_blocks_per_level {
            let s = skips.pop().ok_or_else(|| Error::Shape("unet: ran out of skip activations".into()))?;
            let cat = g.concat(h, s)?;
            h = res_block(g, p, &format!("{prefix}.up.{l}.res.{i}"), cat, emb)?;
        }
        if l > 0 {
            h = g.upsample2x(h)?;
            h = layers::conv(g, p, &format!("{prefix}.up.{l}.upsample"), h, 1)?;
        }
    }
    let h = layers::norm(g, p, &format!("{prefix}.out.norm"), h)?;
    let h = g.silu(h);
    layers::conv(g, p, &format!("{prefix}.out.conv"), h, 1)
}

/// Full U-Net on a graph node.
pub fn unet_graph<T: Elem>(
    g: &mut Graph<T>,
    p: &ParamStore,
    cfg: &UNetConfig,
    z_t: Var,
    t: &[usize],
    class_id: &[usize],
) -> Result<Var> {
    check_conditions(cfg, g.shape(z_t)[0], t, class_id)?;
    let emb = embed(g, p, cfg, PREFIX, t, class_id)?;
    let feats = encoder(g, p, cfg, PREFIX, z_t, emb, None)?;
    decoder(g, p, cfg, PREFIX, feats, emb)
}

pub fn unet_forward(p: &ParamStore, cfg: &UNetConfig, z_t: &Tensor, t: &[usize], class_id: &[usize]) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let x = g.input(z_t.clone());
    let y = unet_graph(&mut g, p, cfg, x, t, class_id)?;
    Ok(g.value(y).clone())
}

/// Base U-Net as a sampler ε-model. A hint is rejected: masks need the
/// control branch.
pub struct UNetDenoiser<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a UNetConfig,
}

impl crate::diffusion::Denoise for UNetDenoiser<'_> {
    fn eps(&mut self, z_t: &Tensor, t: &[usize], class_id: &[usize], hint: Option<&Tensor>) -> Result<Tensor> {
        if hint.is_some() {
            return Err(Error::InvalidArgument("base U-Net cannot consume a mask hint".into()));
        }
        unet_forward(self.params, self.cfg, z_t, t, class_id)
    }
}

/// Closed-form count of the encoder half (embedding, input conv, down path,
/// bottleneck).
pub fn encoder_param_count(cfg: &UNetConfig) -> usize {
    let ted = cfg.time_embed_dim;
    let res = |cin: usize, cout: usize| {
        2 * cin + conv_params(cin, cout, 3) + ted * cout + cout + 2 * cout + conv_params(cout, cout, 3)
            + if cin != cout { conv_params(cin, cout, 1) } else { 0 }
    };
    let mut n = 2 * (ted * ted + ted) + cfg.num_classes * ted;
    n += conv_params(cfg.in_channels, cfg.level_channels(0), 3);
    let mut ch = cfg.level_channels(0);
    for l in 0..cfg.levels() {
        let c = cfg.level_channels(l);
        for _ in 0..cfg.res_blocks_per_level {
            n += res(ch, c);
            ch = c;
        }
        if l + 1 < cfg.levels() {
            n += conv_params(c, c, DOWN_KERNEL);
        }
    }
    n += 2 * res(ch, ch);
    if cfg.attention_at_bottleneck {
        n += 2 * ch + 4 * conv_params(ch, ch, 1);
    }
    n
}
