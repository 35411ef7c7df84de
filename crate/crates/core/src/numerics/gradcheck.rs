//! Finite-difference verification of the reverse pass.

use super::graph::{Graph, Var};
use super::rng::PortableRng;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Max over input elements of `|analytic − central| / max(1, |central|)`,
/// where `f` builds a scalar loss from one variable per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], fd_eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(&f, inputs, fd_eps, None)
}

/// Like [`grad_check`] but probes at most `max_coords` randomly chosen
/// elements of each input. Large networks cannot afford a forward pass per
/// parameter.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor<f64>], fd_eps: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(&f, inputs, fd_eps, Some((max_coords, seed)))
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(shape_err!("grad_check: output must be scalar, got {:?}", v.shape()));
    }
    Ok(v.data()[0])
}

fn check<F>(f: &F, inputs: &[Tensor<f64>], fd_eps: f64, sampling: Option<(usize, u64)>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(shape_err!("grad_check: output must be scalar, got {:?}", g.shape(out)));
    }
    let grads = g.backward(out)?;
    let mut rng = sampling.map(|(_, seed)| PortableRng::new(seed));

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let coords: Vec<usize> = match (&mut rng, sampling) {
            (Some(r), Some((k, _))) if k < input.numel() => (0..k).map(|_| r.below(input.numel())).collect(),
            _ => (0..input.numel()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + fd_eps;
            let plus = eval(f, &probe)?;
            probe[i].data_mut()[j] = orig - fd_eps;
            let minus = eval(f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * fd_eps);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
