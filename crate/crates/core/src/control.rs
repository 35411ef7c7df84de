//! Mask-conditioned control branch grafted onto a frozen U-Net.
//!
//! The branch is a trainable copy of the base encoder (embedding, input conv,
//! down path, bottleneck) under `control.enc`. A strided hint encoder maps the
//! mask to latent resolution and adds it to the copy's input conv features.
//! Every copy skip activation and the bottleneck pass through a 1×1 conv
//! initialized to exactly zero and are added to the matching base
//! activation before the frozen base decoder consumes it.

use crate::denoiser::{self, copy_encoder, encoder_param_count, init_unet, UNetConfig};
use crate::diffusion::Denoise;
use crate::error::{Error, Result};
use crate::layers::{self, conv_params, DOWN_KERNEL};
use crate::numerics::{init, Elem, Graph, ParamStore, PortableRng, Tensor, Var};

pub const PREFIX: &str = "control";
pub const ENCODER_PREFIX: &str = "control.enc";

/// Base model plus grafted branch in one store; every `unet.` tensor is frozen.
#[derive(Clone, Debug)]
pub struct ControlModel {
    pub params: ParamStore,
    pub unet: UNetConfig,
    pub image_size: usize,
}

fn hint_layers(unet: &UNetConfig, image_size: usize) -> Result<usize> {
    let ratio = image_size / unet.latent_size.max(1);
    if image_size % unet.latent_size.max(1) != 0 || !ratio.is_power_of_two() || ratio < 2 {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} is not a power-of-two multiple of latent size {}",
            unet.latent_size
        )));
    }
    Ok(ratio.trailing_zeros() as usize)
}

fn hint_channels(unet: &UNetConfig, layers: usize) -> Vec<usize> {
    (0..layers).map(|i| if i + 1 == layers { unet.level_channels(0) } else { 16 << i }).collect()
}

/// Parameters added by grafting: encoder copy, hint encoder and zero convs.
pub fn branch_param_count(unet: &UNetConfig, image_size: usize) -> Result<usize> {
    let mut n = encoder_param_count(unet);
    let mut cin = 1;
    for c in hint_channels(unet, hint_layers(unet, image_size)?) {
        n += conv_params(cin, c, DOWN_KERNEL);
        cin = c;
    }
    for c in unet.skip_channels() {
        n += conv_params(c, c, 1);
    }
    Ok(n + conv_params(unet.mid_channels(), unet.mid_channels(), 1))
}

/// Builds the branch for a trained base. The base must hold every tensor a
/// fresh U-Net of `unet` would, with matching shapes.
pub fn graft(base: &ParamStore, unet: &UNetConfig, image_size: usize, seed: u64) -> Result<ControlModel> {
    unet.validate()?;
    let layers_n = hint_layers(unet, image_size)?;
    let reference = init_unet(unet, 0)?;
    for r in reference.iter() {
        let got = base
            .get(&r.name)
            .ok_or_else(|| Error::Checkpoint(format!("base checkpoint is missing '{}'", r.name)))?;
        if got.tensor.shape() != r.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "base tensor '{}' has shape {:?}, expected {:?}",
                r.name,
                got.tensor.shape(),
                r.tensor.shape()
            )));
        }
    }
    let mut params = base.filtered(denoiser::PREFIX);
    params.set_frozen(denoiser::PREFIX, true);
    params.merge(copy_encoder(base, unet, denoiser::PREFIX, ENCODER_PREFIX)?)?;

    let mut rng = PortableRng::derive(seed, 0xC7E1);
    let mut cin = 1;
    for (i, c) in hint_channels(unet, layers_n).into_iter().enumerate() {
        init::conv(&mut params, &format!("{PREFIX}.hint.{i}"), cin, c, DOWN_KERNEL, &mut rng)?;
        cin = c;
    }
    for (i, c) in unet.skip_channels().into_iter().enumerate() {
        init::zero_conv(&mut params, &format!("{PREFIX}.zero.{i}"), c, c, 1)?;
    }
    let m = unet.mid_channels();
    init::zero_conv(&mut params, &format!("{PREFIX}.zero.mid"), m, m, 1)?;
    Ok(ControlModel { params, unet: unet.clone(), image_size })
}

fn check_mask(shape: &[usize], n: usize, size: usize) -> Result<()> {
    if shape != [n, 1, size, size] {
        return Err(Error::Shape(format!("mask must be [{n},1,{size},{size}], got {shape:?}")));
    }
    Ok(())
}

/// ε̂ with mask conditioning on a graph.
#[allow(clippy::too_many_arguments)]
pub fn controlled_graph<T: Elem>(
    g: &mut Graph<T>,
    p: &ParamStore,
    unet: &UNetConfig,
    image_size: usize,
    z_t: Var,
    t: &[usize],
    class_id: &[usize],
    mask: Var,
) -> Result<Var> {
    let n = g.shape(z_t)[0];
    check_mask(g.shape(mask), n, image_size)?;
    let layers_n = hint_layers(unet, image_size)?;

    // Base encoder: frozen, so nothing here records gradients.
    let base = denoiser::PREFIX;
    let emb = denoiser::embed(g, p, unet, base, t, class_id)?;
    let mut feats = denoiser::encoder(g, p, unet, base, z_t, emb, None)?;
    if feats.skips.len() != unet.skip_channels().len() {
        return Err(Error::Shape("unet produced an unexpected number of skips".into()));
    }

    let mut h = mask;
    for i in 0..layers_n {
        h = layers::conv(g, p, &format!("{PREFIX}.hint.{i}"), h, 2)?;
        if i + 1 < layers_n {
            h = g.silu(h);
        }
    }
    let cemb = denoiser::embed(g, p, unet, ENCODER_PREFIX, t, class_id)?;
    let branch = denoiser::encoder(g, p, unet, ENCODER_PREFIX, z_t, cemb, Some(h))?;

    for (i, (skip, c)) in feats.skips.iter_mut().zip(branch.skips).enumerate() {
        let z = layers::conv(g, p, &format!("{PREFIX}.zero.{i}"), c, 1)?;
        *skip = g.add(*skip, z)?;
    }
    let z = layers::conv(g, p, &format!("{PREFIX}.zero.mid"), branch.mid, 1)?;
    feats.mid = g.add(feats.mid, z)?;
    denoiser::decoder(g, p, unet, base, feats, emb)
}

impl ControlModel {
    pub fn forward(&self, z_t: &Tensor, t: &[usize], class_id: &[usize], mask: &Tensor) -> Result<Tensor> {
        if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        let mut g = Graph::<f32>::new();
        let x = g.input(z_t.clone());
        let m = g.input(mask.clone());
        let y = controlled_graph(&mut g, &self.params, &self.unet, self.image_size, x, t, class_id, m)?;
        Ok(g.value(y).clone())
    }

    /// Base-only ε̂ using the frozen `unet.` weights.
    pub fn base_forward(&self, z_t: &Tensor, t: &[usize], class_id: &[usize]) -> Result<Tensor> {
        denoiser::unet_forward(&self.params, &self.unet, z_t, t, class_id)
    }

    pub fn base_hash(&self) -> String {
        self.params.hash(denoiser::PREFIX)
    }
}

/// `controlled_forward(z_t, t, class, mask)`.
pub fn controlled_forward(
    model: &ControlModel,
    z_t: &Tensor,
    t: &[usize],
    class_id: &[usize],
    mask: &Tensor,
) -> Result<Tensor> {
    model.forward(z_t, t, class_id, mask)
}

/// Sampler ε-model: the mask hint, when given, is broadcast over the batch.
impl Denoise for &ControlModel {
    fn eps(&mut self, z_t: &Tensor, t: &[usize], class_id: &[usize], hint: Option<&Tensor>) -> Result<Tensor> {
        match hint {
            None => self.base_forward(z_t, t, class_id),
            Some(mask) => {
                let n = z_t.shape()[0];
                let mask = if mask.shape()[0] == n {
                    mask.clone()
                } else if mask.shape()[0] == 1 {
                    Tensor::stack(&vec![mask.batch_item(0)?; n])?
                } else {
                    return Err(Error::Shape(format!("mask batch {} vs latent batch {n}", mask.shape()[0])));
                };
                self.forward(z_t, t, class_id, &mask)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{adam_step, AdamState};

    fn tiny() -> UNetConfig {
        UNetConfig { base_channels: 8, time_embed_dim: 16, ..UNetConfig::default() }
    }

    fn trained_base(cfg: &UNetConfig, seed: u64) -> ParamStore {
        let mut p = init_unet(cfg, seed).unwrap();
        let mut rng = PortableRng::new(seed + 100);
        for q in p.iter_mut() {
            if q.name.starts_with("unet.out.conv") {
                q.tensor = rng.uniform_tensor(q.tensor.shape(), -0.3, 0.3);
            }
        }
        p
    }

    fn inputs(n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = PortableRng::new(seed);
        let z = rng.normal_tensor(&[n, 4, 8, 8]);
        let mask = rng.uniform_tensor::<f32>(&[n, 1, 64, 64], 0.0, 1.0).map(|v| v.round());
        (z, mask)
    }

    #[test]
    fn identity_at_graft() {
        let cfg = tiny();
        let base = trained_base(&cfg, 1);
        let m = graft(&base, &cfg, 64, 2).unwrap();
        for seed in 0..3 {
            let (z, mask) = inputs(2, seed);
            let a = m.forward(&z, &[10, 700], &[0, 2], &mask).unwrap();
            let b = denoiser::unet_forward(&base, &cfg, &z, &[10, 700], &[0, 2]).unwrap();
            assert!(b.max_abs() > 0.0);
            assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        }
        let ones = Tensor::full([1, 1, 64, 64], 1.0);
        let zeros = Tensor::zeros([1, 1, 64, 64]);
        let z = inputs(1, 9).0;
        assert_eq!(m.forward(&z, &[5], &[1], &ones).unwrap(), m.forward(&z, &[5], &[1], &zeros).unwrap());
    }

    #[test]
    fn copy_is_bit_exact_and_zero_convs_are_zero() {
        let cfg = tiny();
        let base = trained_base(&cfg, 3);
        let m = graft(&base, &cfg, 64, 4).unwrap();
        let mut copied = 0;
        for q in m.params.iter().filter(|q| q.name.starts_with(ENCODER_PREFIX)) {
            let src = base.tensor(&q.name.replacen(ENCODER_PREFIX, denoiser::PREFIX, 1)).unwrap();
            assert_eq!(src.to_le_bytes(), q.tensor.to_le_bytes(), "{}", q.name);
            copied += 1;
        }
        assert!(copied > 0);
        let zero: Vec<_> = m.params.iter().filter(|q| q.name.starts_with("control.zero.")).collect();
        assert_eq!(zero.len(), 2 * (cfg.skip_channels().len() + 1));
        assert!(zero.iter().all(|q| q.tensor.max_abs() == 0.0));
        assert!(m.params.iter().filter(|q| q.name.starts_with("unet.")).all(|q| q.frozen));
        assert!(m.params.iter().filter(|q| q.name.starts_with("control.")).all(|q| !q.frozen));
    }

    #[test]
    fn trainable_count_matches_oracle() {
        for cfg in [tiny(), UNetConfig::default()] {
            let m = graft(&init_unet(&cfg, 0).unwrap(), &cfg, 64, 0).unwrap();
            let trainable: usize = m.params.iter().filter(|q| !q.frozen).map(|q| q.tensor.numel()).sum();
            assert_eq!(trainable, branch_param_count(&cfg, 64).unwrap());
            // Hand count for the default plan: hint 1→16→32→32, 9 skips, bottleneck 128.
            if cfg == UNetConfig::default() {
                let hint = (16 * 16 + 16) + (32 * 16 * 16 + 32) + (32 * 32 * 16 + 32);
                let zero = [32, 32, 32, 32, 64, 64, 64, 128, 128, 128].iter().map(|c| c * c + c).sum::<usize>();
                assert_eq!(trainable, encoder_param_count(&cfg) + hint + zero);
            }
        }
    }

    #[test]
    fn graft_rejects_incomplete_base() {
        let cfg = tiny();
        let base = init_unet(&cfg, 0).unwrap();
        let partial = base.filtered("unet.down");
        assert!(matches!(graft(&partial, &cfg, 64, 0), Err(Error::Checkpoint(_))));
        let other = init_unet(&UNetConfig { base_channels: 16, ..tiny() }, 0).unwrap();
        assert!(graft(&other, &cfg, 64, 0).is_err());
        assert!(graft(&base, &cfg, 48, 0).is_err());
    }

    #[test]
    fn mask_validation() {
        let cfg = tiny();
        let m = graft(&init_unet(&cfg, 0).unwrap(), &cfg, 64, 0).unwrap();
        let z = inputs(1, 0).0;
        assert!(m.forward(&z, &[3], &[0], &Tensor::zeros([1, 1, 32, 32])).is_err());
        assert!(m.forward(&z, &[3], &[0], &Tensor::full([1, 1, 64, 64], 2.0)).is_err());
    }

    fn train_step(m: &mut ControlModel, lr: f64, seed: u64) {
        let (z, mask) = inputs(2, seed);
        let eps: Tensor = PortableRng::new(seed + 1).normal_tensor(&[2, 4, 8, 8]);
        let mut g = Graph::<f32>::new();
        let x = g.input(z);
        let mk = g.input(mask);
        let y = controlled_graph(&mut g, &m.params, &m.unet, 64, x, &[100, 800], &[1, 2], mk).unwrap();
        let e = g.input(eps);
        let l = g.mse_loss(y, e).unwrap();
        let grads = g.backward(l).unwrap();
        m.params.accumulate_grads(&g, &grads);
        let base_grads = m.params.iter().filter(|q| q.name.starts_with("unet.")).filter(|q| q.grad.is_some()).count();
        assert_eq!(base_grads, 0);
        assert!(m.params.get("control.zero.mid.weight").unwrap().grad.is_some());
        adam_step(&mut m.params, &mut AdamState::new(lr)).unwrap();
    }

    #[test]
    fn training_leaves_base_untouched() {
        let cfg = tiny();
        let mut m = graft(&trained_base(&cfg, 5), &cfg, 64, 6).unwrap();
        let base_before = m.base_hash();
        let branch_before = m.params.hash(PREFIX);
        train_step(&mut m, 1e-3, 7);
        assert_eq!(m.base_hash(), base_before);
        assert_ne!(m.params.hash(PREFIX), branch_before);
        // After the zero convs move, the mask matters.
        train_step(&mut m, 1e-3, 8);
        let z = inputs(1, 10).0;
        let a = m.forward(&z, &[50], &[1], &Tensor::zeros([1, 1, 64, 64])).unwrap();
        let b = m.forward(&z, &[50], &[1], &Tensor::full([1, 1, 64, 64], 1.0)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn zero_lr_leaves_branch_unchanged() {
        let cfg = tiny();
        let mut m = graft(&trained_base(&cfg, 5), &cfg, 64, 6).unwrap();
        let before = m.params.hash("");
        train_step(&mut m, 0.0, 7);
        assert_eq!(m.params.hash(""), before);
    }

    #[test]
    fn sampler_denoise_broadcasts_mask() {
        let cfg = tiny();
        let m = graft(&trained_base(&cfg, 1), &cfg, 64, 2).unwrap();
        let (z, _) = inputs(3, 4);
        let mask = Tensor::full([1, 1, 64, 64], 1.0);
        let mut d = &m;
        let y = d.eps(&z, &[5; 3], &[1; 3], Some(&mask)).unwrap();
        assert_eq!(y.shape(), &[3, 4, 8, 8]);
        let base = d.eps(&z, &[5; 3], &[1; 3], None).unwrap();
        assert_eq!(y, base);
    }
}
