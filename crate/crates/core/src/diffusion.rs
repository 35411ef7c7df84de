//! Noise schedules, the closed-form forward process and the reverse samplers.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 := 1` so that a DDIM step
//! to `t_prev = 0` lands on the clean estimate.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Elem, PortableRng, Tensor};

/// β/α/ᾱ/β̃ tables, stored 0-based (`beta[t - 1]` is β_t).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear β schedule inclusive of both endpoints.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_var = (0..steps)
        .map(|i| if i == 0 { beta[0] } else { (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i] })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar, posterior_var })
}

impl NoiseSchedule {
    pub fn default_linear() -> Self {
        make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }

    /// T.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }

    /// ᾱ_t for `t ∈ [0, T]`, with ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

fn same_shape<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Elem>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, s: &NoiseSchedule) -> Result<Tensor<T>> {
    s.check_t(t)?;
    same_shape(x0, eps, "q_sample")?;
    let ab = s.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| T::of(a * x.f64() + b * e.f64()))
}

/// Per-item timesteps: row `i` of `x0` is noised at `ts[i]`.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "q_sample")?;
    if ts.len() != x0.shape()[0] {
        return Err(shape_err!("q_sample: {} timesteps for batch of {}", ts.len(), x0.shape()[0]));
    }
    let per = x0.numel() / ts.len();
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        s.check_t(t)?;
        let ab = s.alpha_bar_at(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in i * per..(i + 1) * per {
            out.data_mut()[j] = (a * x0.data()[j] as f64 + b * eps.data()[j] as f64) as f32;
        }
    }
    Ok(out)
}

/// `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0<T: Elem>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    s.check_t(t)?;
    same_shape(x_t, eps_hat, "predict_x0")?;
    let ab = s.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| T::of((x.f64() - b * e.f64()) / a))
}

/// Ancestral step: posterior mean plus `√β̃_t·z` (no noise at t = 1).
pub fn ddpm_step<T: Elem>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_t(t)?;
    same_shape(x_t, eps_hat, "ddpm_step")?;
    same_shape(x_t, z, "ddpm_step noise")?;
    let i = t - 1;
    let coef = s.beta[i] / (1.0 - s.alpha_bar[i]).sqrt();
    let inv_sqrt_alpha = 1.0 / s.alpha[i].sqrt();
    let sigma = if t > 1 { s.posterior_var[i].sqrt() } else { 0.0 };
    let mut out = x_t.clone();
    for (j, o) in out.data_mut().iter_mut().enumerate() {
        let mean = (x_t.data()[j].f64() - coef * eps_hat.data()[j].f64()) * inv_sqrt_alpha;
        *o = T::of(if t > 1 { mean + sigma * z.data()[j].f64() } else { mean });
    }
    Ok(out)
}

/// DDIM step from `t` to `t_prev < t` with stochasticity `eta`; `z` is only
/// read when σ > 0.
pub fn ddim_step<T: Elem>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    eta: f64,
    z: Option<&Tensor<T>>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("ddim_step: t_prev {t_prev} must be below t {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("ddim_step: eta {eta} outside [0, 1]")));
    }
    same_shape(x_t, eps_hat, "ddim_step")?;
    let (ab, ab_prev) = (s.alpha_bar_at(t), s.alpha_bar_at(t_prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let noise = if sigma > 0.0 {
        let z = z.ok_or_else(|| Error::InvalidArgument("ddim_step: eta > 0 needs a noise tensor".into()))?;
        same_shape(x_t, z, "ddim_step noise")?;
        Some(z)
    } else {
        None
    };
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x_t.clone();
    for (j, o) in out.data_mut().iter_mut().enumerate() {
        let e = eps_hat.data()[j].f64();
        let x0 = (x_t.data()[j].f64() - sb * e) / sa;
        let mut v = ab_prev.sqrt() * x0 + dir * e;
        if let Some(z) = noise {
            v += sigma * z.data()[j].f64();
        }
        *o = T::of(v);
    }
    Ok(out)
}

/// ε-prediction objective: mean squared error.
pub fn diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    same_shape(eps, eps_hat, "diffusion_loss")?;
    let n = eps.numel() as f64;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::Ddim, steps: 50, eta: 0.0, guidance_scale: 3.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > s.len() {
            return Err(Error::InvalidArgument(format!("sampler steps {} outside [1, {}]", self.steps, s.len())));
        }
        if self.kind == SamplerKind::Ddpm && self.steps != s.len() {
            return Err(Error::InvalidArgument(format!("ddpm sampling needs steps == T ({})", s.len())));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance scale {} must be ≥ 0", self.guidance_scale)));
        }
        Ok(())
    }

    /// Descending timesteps visited by the sampler. DDIM spaces them evenly
    /// over `[1, T]`, always including both ends.
    pub fn timesteps(&self, s: &NoiseSchedule) -> Vec<usize> {
        let big_t = s.len();
        if self.kind == SamplerKind::Ddpm || self.steps >= big_t {
            return (1..=big_t).rev().collect();
        }
        if self.steps == 1 {
            return vec![big_t];
        }
        let mut ts: Vec<usize> = (0..self.steps)
            .map(|i| 1 + ((big_t - 1) as f64 * i as f64 / (self.steps - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    }
}

/// Null (unconditional) class token used for classifier-free guidance.
pub const NULL_CLASS: usize = 3;

/// One ε̂ evaluation: `(z_t, per-item t, per-item class, optional hint)`.
pub trait Denoise {
    fn eps(&mut self, z_t: &Tensor, t: &[usize], class_id: &[usize], hint: Option<&Tensor>) -> Result<Tensor>;
}

impl<F> Denoise for F
where
    F: FnMut(&Tensor, &[usize], &[usize], Option<&Tensor>) -> Result<Tensor>,
{
    fn eps(&mut self, z_t: &Tensor, t: &[usize], class_id: &[usize], hint: Option<&Tensor>) -> Result<Tensor> {
        self(z_t, t, class_id, hint)
    }
}

/// Guided ε̂ = ε̂_null + w·(ε̂_cond − ε̂_null). `w = 0` and `w = 1` evaluate
/// only the branch the formula collapses to.
fn guided_eps<D: Denoise>(
    f: &mut D,
    z: &Tensor,
    t: usize,
    class_id: usize,
    hint: Option<&Tensor>,
    w: f64,
) -> Result<Tensor> {
    let n = z.shape()[0];
    let ts = vec![t; n];
    if w == 0.0 {
        return f.eps(z, &ts, &vec![NULL_CLASS; n], hint);
    }
    if w == 1.0 || class_id == NULL_CLASS {
        return f.eps(z, &ts, &vec![class_id; n], hint);
    }
    let both = Tensor::stack(&[z.clone(), z.clone()])?;
    // A batch-1 hint is broadcast by the model; a per-item hint is repeated.
    let hint2 = match hint {
        Some(h) if h.shape()[0] == 1 && n > 1 => Some(h.clone()),
        Some(h) => Some(Tensor::stack(&[h.clone(), h.clone()])?),
        None => None,
    };
    let mut classes = vec![class_id; n];
    classes.extend(std::iter::repeat_n(NULL_CLASS, n));
    let out = f.eps(&both, &vec![t; 2 * n], &classes, hint2.as_ref())?;
    let half = out.numel() / 2;
    let data = (0..half)
        .map(|j| {
            let (c, u) = (out.data()[j] as f64, out.data()[half + j] as f64);
            (u + w * (c - u)) as f32
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Full reverse loop from `z_T ~ N(0, I)` of `latent_shape`; deterministic
/// given `cfg.seed`.
pub fn sample<D: Denoise>(
    denoise: &mut D,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    class_id: usize,
    hint: Option<&Tensor>,
    latent_shape: &[usize],
) -> Result<Tensor> {
    cfg.validate(s)?;
    let mut rng = PortableRng::derive(cfg.seed, 0x5A4D_504C);
    let mut z: Tensor = rng.normal_tensor(latent_shape);
    let ts = cfg.timesteps(s);
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_eps(denoise, &z, t, class_id, hint, cfg.guidance_scale)?;
        z = match cfg.kind {
            SamplerKind::Ddpm => {
                let noise = if t > 1 { rng.normal_tensor(latent_shape) } else { Tensor::zeros(latent_shape.to_vec()) };
                ddpm_step(&z, &eps, t, &noise, s)?
            }
            SamplerKind::Ddim => {
                let t_prev = ts.get(i + 1).copied().unwrap_or(0);
                let noise = (cfg.eta > 0.0).then(|| rng.normal_tensor(latent_shape));
                ddim_step(&z, &eps, t, t_prev, cfg.eta, noise.as_ref(), s)?
            }
        };
    }
    Ok(z)
}

/// One training minibatch in latent space.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub z: Tensor,
    pub t: Vec<usize>,
    pub class_id: Vec<usize>,
}

impl LatentBatch {
    pub fn new(z: Tensor, t: Vec<usize>, class_id: Vec<usize>, s: &NoiseSchedule) -> Result<Self> {
        let n = z.shape()[0];
        if t.len() != n || class_id.len() != n {
            return Err(shape_err!("latent batch of {n} with {} timesteps and {} classes", t.len(), class_id.len()));
        }
        for &ti in &t {
            s.check_t(ti)?;
        }
        if let Some(c) = class_id.iter().find(|&&c| c > NULL_CLASS) {
            return Err(Error::InvalidArgument(format!("class id {c} outside [0, {NULL_CLASS}]")));
        }
        Ok(Self { z, t, class_id })
    }
}
