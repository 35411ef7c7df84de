//! Small CNN classifier: three stride-2 conv blocks, global average pool,
//! linear head to class logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, DOWN_KERNEL};
use crate::numerics::{init, Elem, Graph, ParamStore, PortableRng, Tensor, Var};

pub const PREFIX: &str = "classifier";
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { image_size: 64, channels: vec![16, 32, 64], num_classes: 3 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.num_classes < 2 {
            return Err(Error::InvalidArgument("classifier needs ≥ 1 nonzero block width and ≥ 2 classes".into()));
        }
        if self.image_size % (1 << self.channels.len()) != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

pub fn init_classifier(cfg: &ClassifierConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = PortableRng::derive(seed, 0xC1A5);
    let mut p = ParamStore::new();
    let mut cin = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        layers::init_conv_norm(&mut p, &format!("{PREFIX}.block.{i}"), cin, c, DOWN_KERNEL, &mut rng)?;
        cin = c;
    }
    init::linear(&mut p, &format!("{PREFIX}.head"), cin, cfg.num_classes, &mut rng)?;
    Ok(p)
}

/// Logits `[N, num_classes]` for images `[N, 1, S, S]`.
pub fn classifier_graph<T: Elem>(g: &mut Graph<T>, p: &ParamStore, cfg: &ClassifierConfig, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 1 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::Shape(format!("classifier: expected [N,1,{0},{0}], got {s:?}", cfg.image_size)));
    }
    let mut h = x;
    for i in 0..cfg.channels.len() {
        h = layers::conv_norm_act(g, p, &format!("{PREFIX}.block.{i}"), h, 2)?;
    }
    let pooled = g.mean_spatial(h)?;
    layers::linear(g, p, &format!("{PREFIX}.head"), pooled)
}

/// Softmax class probabilities, one row per image.
pub fn predict_proba(p: &ParamStore, cfg: &ClassifierConfig, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let item = images.numel() / n.max(1);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(INFER_CHUNK) {
        let len = INFER_CHUNK.min(n - start);
        let mut shape = images.shape().to_vec();
        shape[0] = len;
        let chunk = Tensor::new(shape, images.data()[start * item..(start + len) * item].to_vec())?;
        let mut g = Graph::<f32>::new();
        let x = g.input(chunk);
        let logits = classifier_graph(&mut g, p, cfg, x)?;
        let probs = g.softmax(logits, 1)?;
        let k = cfg.num_classes;
        out.extend(g.value(probs).data().chunks(k).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Index of the largest score; ties go to the lower class.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_sampled;

    #[test]
    fn shapes_and_softmax_rows() {
        let cfg = ClassifierConfig::default();
        let p = init_classifier(&cfg, 0).unwrap();
        let x: Tensor = PortableRng::new(1).uniform_tensor(&[5, 1, 64, 64], -1.0, 1.0);
        let probs = predict_proba(&p, &cfg, &x).unwrap();
        assert_eq!(probs.len(), 5);
        for r in &probs {
            assert_eq!(r.len(), 3);
            assert!(r.iter().all(|v| v.is_finite()));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert!(predict_proba(&p, &cfg, &Tensor::zeros([1, 1, 32, 32])).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let cfg = ClassifierConfig { image_size: 16, channels: vec![4, 4], num_classes: 3 };
        let p = init_classifier(&cfg, 2).unwrap();
        let x: Tensor<f64> = PortableRng::new(3).uniform_tensor(&[2, 1, 16, 16], -1.0, 1.0);
        let names: Vec<String> = p.iter().map(|q| q.name.clone()).collect();
        let inputs: Vec<Tensor<f64>> = p.iter().map(|q| q.tensor.cast()).collect();
        let err = grad_check_sampled(
            |g, vars| {
                for (n, &v) in names.iter().zip(vars) {
                    g.bind_override(n.clone(), v);
                }
                let xi = g.input(x.clone());
                let logits = classifier_graph(g, &p, &cfg, xi)?;
                g.cross_entropy(logits, &[0, 2])
            },
            &inputs,
            1e-4,
            6,
            4,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.9, 0.05, 0.05]), 0);
    }
}
