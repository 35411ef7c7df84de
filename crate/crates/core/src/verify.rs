//! Invariant suite behind the `verify` command: gradient checks, schedule
//! identities, the zero-convolution identity and checkpoint integrity.

use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointHeader, Stage};
use crate::codec::{self, CodecConfig};
use crate::control;
use crate::denoiser::{self, UNetConfig};
use crate::diffusion::{make_schedule, predict_x0, q_sample};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, grad_check_sampled, Graph, ParamStore, PortableRng, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-4;
pub const SCHEDULE_TOL: f64 = 1e-12;
pub const ROUND_TRIP_TOL: f64 = 1e-5;
/// Sampled coordinates per tensor in the full-network gradient checks.
pub const GRAPH_COORDS: usize = 2;

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or difference) and the bound it was held to.
    pub value: f64,
    pub bound: f64,
    pub elapsed_ms: u64,
}

impl Check {
    fn bounded(name: impl Into<String>, value: f64, bound: f64, clock: Instant) -> Self {
        Self { name: name.into(), passed: value <= bound, value, bound, elapsed_ms: clock.elapsed().as_millis() as u64 }
    }

    /// `name pass|FAIL value=… bound=… ms=…`.
    pub fn line(&self) -> String {
        format!(
            "{} {} value={:e} bound={:e} ms={}",
            self.name,
            if self.passed { "pass" } else { "FAIL" },
            self.value,
            self.bound,
            self.elapsed_ms
        )
    }
}

fn t64(shape: &[usize], rng: &mut PortableRng) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

/// Random projection to a scalar so every output element carries gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = PortableRng::new(seed ^ 0xABCD).normal_tensor(g.shape(y));
    g.dot_const(y, &r)
}

type OpCase = fn(u64) -> Result<f64>;

fn op_linear(seed: u64) -> Result<f64> {
    let mut rng = PortableRng::new(seed);
    let inputs = [t64(&[3, 4], &mut rng), t64(&[4, 2], &mut rng), t64(&[2], &mut rng)];
    grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            probe(g, y, seed)
        },
        &inputs,
        FD_EPS,
    )
}

fn op_conv(seed: u64) -> Result<f64> {
    let mut rng = PortableRng::new(seed);
    let inputs = [
        t64(&[2, 2, 5, 5], &mut rng),
        t64(&[3, 2, 3, 3], &mut rng),
        t64(&[3], &mut rng),
        t64(&[2, 3, 3, 3], &mut rng),
    ];
    grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            let y = g.silu(y);
            g.mse_loss(y, v[3])
        },
        &inputs,
        FD_EPS,
    )
}

fn op_group_norm(seed: u64) -> Result<f64> {
    let mut rng = PortableRng::new(seed);
    let inputs = [t64(&[2, 4, 3, 3], &mut rng), t64(&[4], &mut rng), t64(&[4], &mut rng)];
    grad_check(
        |g, v| {
            let y = g.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
            probe(g, y, seed)
        },
        &inputs,
        FD_EPS,
    )
}

fn op_elementwise(seed: u64) -> Result<f64> {
    let mut rng = PortableRng::new(seed);
    let inputs = [t64(&[2, 2, 2, 2], &mut rng), t64(&[2, 2, 2, 2], &mut rng), t64(&[2, 2], &mut rng)];
    grad_check(
        |g, v| {
            let a = g.tanh(v[0]);
            let b = g.exp(v[1]);
            let c = g.mul(a, b)?;
            let c = g.sub(c, v[0])?;
            let c = g.add_channel(c, v[2])?;
            let c = g.scale(c, 0.7);
            let c = g.clamp(c, -2.5, 2.5);
            let u = g.upsample2x(c)?;
            let cat = g.concat(u, u)?;
            let s = g.slice_channels(cat, 1, 2)?;
            let s = g.add(s, u)?;
            let m = g.mean_spatial(s)?;
            probe(g, m, seed)
        },
        &inputs,
        FD_EPS,
    )
}

fn op_attention(seed: u64) -> Result<f64> {
    let mut rng = PortableRng::new(seed);
    let inputs = [t64(&[2, 3, 4], &mut rng), t64(&[2, 3, 4], &mut rng), t64(&[2, 3, 4], &mut rng)];
    grad_check(
        |g, v| {
            let o = g.attention_single_head(v[0], v[1], v[2])?;
            let o = g.swap_last2(o)?;
            let o = g.reshape(o, &[2, 12])?;
            let o = g.softmax(o, 1)?;
            probe(g, o, seed)
        },
        &inputs,
        FD_EPS,
    )
}

fn op_losses(seed: u64) -> Result<f64> {
    let mut rng = PortableRng::new(seed);
    let inputs = [t64(&[3, 4], &mut rng), t64(&[3, 4], &mut rng), t64(&[4, 3], &mut rng)];
    grad_check(
        |g, v| {
            let kl = g.kl_normal(v[0], v[1])?;
            let rows = g.gather(v[2], &[2, 0, 2])?;
            let ce = g.cross_entropy(rows, &[1, 0, 2])?;
            let total = g.add(kl, ce)?;
            let s = g.sum(v[0]);
            let s = g.scale(s, 0.01);
            g.add(total, s)
        },
        &inputs,
        FD_EPS,
    )
}

pub const OP_CASES: [(&str, OpCase); 6] = [
    ("linear", op_linear),
    ("conv2d+silu+mse", op_conv),
    ("group_norm", op_group_norm),
    ("elementwise+shape", op_elementwise),
    ("softmax+attention", op_attention),
    ("kl+gather+cross_entropy", op_losses),
];

/// Binds every tensor of `p` as a differentiable input after `lead`.
fn param_inputs(lead: Vec<Tensor<f64>>, p: &ParamStore) -> (Vec<String>, Vec<Tensor<f64>>) {
    let names = p.iter().map(|q| q.name.clone()).collect();
    let mut inputs = lead;
    inputs.extend(p.iter().map(|q| q.tensor.cast::<f64>()));
    (names, inputs)
}

/// Relative gradient error of the full codec loss (input and all weights,
/// `coords` sampled elements per tensor).
pub fn codec_loss_grad_error(seed: u64, coords: usize) -> Result<f64> {
    let cfg = CodecConfig { base_channels: 4, decoder_top_channels: 2, ..CodecConfig::default() };
    let p = codec::init_codec(&cfg, seed)?;
    let mut rng = PortableRng::new(seed ^ 0xC0DE);
    let x = rng.uniform_tensor::<f64>(&[1, 1, cfg.image_size, cfg.image_size], -1.0, 1.0);
    let noise = rng.normal_tensor::<f64>(&cfg.latent_shape(1));
    let (names, inputs) = param_inputs(vec![x], &p);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        for (name, &var) in names.iter().zip(&v[1..]) {
            g.bind_override(name.clone(), var);
        }
        let (mu, lv) = codec::encode_graph(g, &p, &cfg, v[0])?;
        let e = g.input(noise.clone());
        let z = codec::reparameterize_graph(g, mu, lv, e)?;
        let r = codec::decode_graph(g, &p, &cfg, z)?;
        codec::codec_loss_graph(g, v[0], r, mu, lv, 0.5)
    };
    grad_check_sampled(f, &inputs, FD_EPS, coords, seed)
}

/// Small U-Net with every weight random, including the output conv that
/// initialization zeroes.
pub fn random_unet(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    let mut p = denoiser::init_unet(cfg, seed)?;
    let mut rng = PortableRng::new(seed ^ 0xFF);
    for q in p.iter_mut() {
        if q.name.starts_with("unet.out.conv") {
            q.tensor = rng.uniform_tensor(q.tensor.shape(), -0.2, 0.2);
        }
    }
    Ok(p)
}

/// Relative gradient error of the ε-prediction loss on a `1×4×8×8` latent.
pub fn unet_loss_grad_error(seed: u64, coords: usize) -> Result<f64> {
    let cfg = UNetConfig { base_channels: 8, time_embed_dim: 8, ..UNetConfig::default() };
    let p = random_unet(&cfg, seed)?;
    let mut rng = PortableRng::new(seed ^ 0xD1FF);
    let z = rng.normal_tensor::<f64>(&[1, 4, 8, 8]);
    let eps = rng.normal_tensor::<f64>(&[1, 4, 8, 8]);
    let t = 1 + rng.below(1000);
    let class = rng.below(3);
    let (names, inputs) = param_inputs(vec![z], &p);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        for (name, &var) in names.iter().zip(&v[1..]) {
            g.bind_override(name.clone(), var);
        }
        let y = denoiser::unet_graph(g, &p, &cfg, v[0], &[t], &[class])?;
        let e = g.input(eps.clone());
        g.mse_loss(y, e)
    };
    grad_check_sampled(f, &inputs, FD_EPS, coords, seed)
}

/// Worst gradient error of every op family over `seeds` seeds and of the
/// full codec and U-Net losses over `graph_seeds` seeds.
pub fn grad_checks(seeds: u64, graph_seeds: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, case) in OP_CASES {
        let clock = Instant::now();
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(case(s)?);
        }
        out.push(Check::bounded(format!("grad_check/{name}"), worst, GRAD_TOL, clock));
    }
    for (name, f) in [("codec_loss", codec_loss_grad_error as fn(u64, usize) -> Result<f64>), ("unet_loss", unet_loss_grad_error)] {
        let clock = Instant::now();
        let mut worst = 0.0f64;
        for s in 0..graph_seeds {
            worst = worst.max(f(s, GRAPH_COORDS)?);
        }
        out.push(Check::bounded(format!("grad_check/{name}"), worst, GRAD_TOL, clock));
    }
    Ok(out)
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// ᾱ recurrence, posterior variance formula and the `predict_x0 ∘ q_sample`
/// round trip for `T ∈ {1, 2, 50, 1000}`.
pub fn schedule_identities() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for steps in [1usize, 2, 50, 1000] {
        let clock = Instant::now();
        let s = make_schedule(steps, 1e-4, 0.02)?;
        let mut recur = 0.0f64;
        let mut post = 0.0f64;
        for i in 0..steps {
            let prev = if i == 0 { 1.0 } else { s.alpha_bar[i - 1] };
            recur = recur.max(rel(s.alpha_bar[i], prev * (1.0 - s.beta[i])));
            // β̃_1 is 0 by the formula; the table stores β_1 there.
            if i > 0 {
                post = post.max(rel(s.posterior_var[i], (1.0 - prev) / (1.0 - s.alpha_bar[i]) * s.beta[i]));
            }
        }
        out.push(Check::bounded(format!("schedule/T={steps}/alpha_bar_recurrence"), recur, SCHEDULE_TOL, clock));
        out.push(Check::bounded(format!("schedule/T={steps}/posterior_variance"), post, SCHEDULE_TOL, clock));

        let clock = Instant::now();
        let mut rng = PortableRng::new(steps as u64);
        let x0: Tensor<f64> = rng.normal_tensor(&[1, 4, 8, 8]);
        let eps: Tensor<f64> = rng.normal_tensor(&[1, 4, 8, 8]);
        let mut worst = 0.0f64;
        for t in 1..=steps {
            let xt = q_sample(&x0, t, &eps, &s)?;
            worst = worst.max(predict_x0(&xt, &eps, t, &s)?.max_abs_diff(&x0)?);
        }
        out.push(Check::bounded(format!("schedule/T={steps}/x0_round_trip"), worst, ROUND_TRIP_TOL, clock));
    }
    Ok(out)
}

/// Largest `|controlled − base|` over `tuples` random `(z_t, t, class,
/// mask)` inputs right after grafting onto a random base. Must be exactly 0.
pub fn zero_conv_identity(tuples: usize, seed: u64) -> Result<Check> {
    let clock = Instant::now();
    let cfg = UNetConfig::default();
    let base = random_unet(&cfg, seed)?;
    let m = control::graft(&base, &cfg, 64, seed + 1)?;
    let mut rng = PortableRng::derive(seed, 0x2E70);
    let mut worst = 0.0f64;
    for _ in 0..tuples {
        let z: Tensor = rng.normal_tensor(&[1, cfg.in_channels, cfg.latent_size, cfg.latent_size]);
        let t = 1 + rng.below(1000);
        let class = rng.below(4);
        let density = rng.uniform();
        let mask = Tensor::from_fn([1, 1, 64, 64], |_| if rng.uniform() < density { 1.0 } else { 0.0 });
        let a = m.forward(&z, &[t], &[class], &mask)?;
        let b = m.base_forward(&z, &[t], &[class])?;
        worst = worst.max(a.max_abs_diff(&b)?);
    }
    Ok(Check::bounded(format!("zero_conv_identity/{tuples}_tuples"), worst, 0.0, clock))
}

/// Serialize → parse → serialize of a fresh codec checkpoint, and rejection
/// of a single flipped byte.
pub fn checkpoint_round_trip(seed: u64) -> Result<Vec<Check>> {
    let clock = Instant::now();
    let cfg = CodecConfig { base_channels: 4, decoder_top_channels: 2, ..CodecConfig::default() };
    let header = CheckpointHeader::new(Stage::Codec, serde_json::json!({ "model": cfg }), seed);
    let ck = Checkpoint::new(header, codec::init_codec(&cfg, seed)?);
    let bytes = ck.to_bytes()?;
    let (back, hash) = Checkpoint::from_bytes(&bytes)?;
    let same = back.to_bytes()? == bytes && hash == ck.content_hash()? && back.params.hash("") == ck.params.hash("");
    let mut out = vec![Check::bounded("checkpoint/round_trip", if same { 0.0 } else { 1.0 }, 0.0, clock)];

    let clock = Instant::now();
    let mut corrupt = bytes.clone();
    let at = PortableRng::new(seed).below(corrupt.len() - 32);
    corrupt[at] ^= 0x40;
    let detected = matches!(Checkpoint::from_bytes(&corrupt), Err(Error::HashMismatch(_)));
    out.push(Check::bounded("checkpoint/corruption_detected", if detected { 0.0 } else { 1.0 }, 0.0, clock));
    Ok(out)
}

/// The whole suite. `quick` trims seed counts for interactive use.
pub fn run_suite(quick: bool, seed: u64) -> Result<Vec<Check>> {
    let (seeds, graph_seeds, tuples) = if quick { (3, 1, 10) } else { (20, 3, 100) };
    let mut out = grad_checks(seeds, graph_seeds)?;
    out.extend(schedule_identities()?);
    out.push(zero_conv_identity(tuples, seed)?);
    out.extend(checkpoint_round_trip(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let checks = run_suite(true, 0).unwrap();
        for c in &checks {
            assert!(c.passed, "{}", c.line());
        }
        assert!(checks.iter().any(|c| c.name == "checkpoint/corruption_detected"));
    }

    #[test]
    fn broken_identity_is_reported() {
        let mut c = Check::bounded("x", 1e-3, GRAD_TOL, Instant::now());
        assert!(!c.passed);
        assert!(c.line().contains("FAIL"));
        c.value = 0.0;
        assert!(c.line().starts_with("x FAIL"));
    }
}
