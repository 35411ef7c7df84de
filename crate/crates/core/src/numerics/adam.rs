use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { m: BTreeMap::new(), v: BTreeMap::new(), step_count: 0, lr, beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 }
    }
}

/// One bias-corrected Adam update over every non-frozen parameter. Frozen
/// parameters are skipped entirely; all gradients are cleared afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.frozen && p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for p in store.iter_mut().filter(|p| !p.frozen) {
        let grad = p.grad.take().expect("checked above");
        let n = p.tensor.numel();
        let m = state.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((w, &g), mi), vi) in p.tensor.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let m_new = state.beta1 * *mi as f64 + (1.0 - state.beta1) * g;
            let v_new = state.beta2 * *vi as f64 + (1.0 - state.beta2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let step = state.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + state.eps_hat);
            *w = (*w as f64 - step) as f32;
        }
    }
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(value: f32, grad: f32, frozen: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value)).unwrap();
        let p = s.get_mut("w").unwrap();
        p.grad = Some(Tensor::scalar(grad));
        p.frozen = frozen;
        s
    }

    #[test]
    fn zero_gradient_leaves_data_unchanged() {
        let mut s = scalar_store(0.7, 0.0, false);
        let mut st = AdamState::new(0.1);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.tensor("w").unwrap().data()[0], 0.7);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        let mut s = scalar_store(0.0, 1.0, false);
        let mut st = AdamState::new(0.1);
        adam_step(&mut s, &mut st).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + st.eps_hat));
        assert!((s.tensor("w").unwrap().data()[0] as f64 - expected).abs() < 1e-7);
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn frozen_parameter_is_byte_identical() {
        let mut s = scalar_store(0.123_456_7, 5.0, true);
        let before = s.tensor("w").unwrap().to_le_bytes();
        let mut st = AdamState::new(0.1);
        for _ in 0..3 {
            s.get_mut("w").unwrap().grad = Some(Tensor::scalar(5.0));
            adam_step(&mut s, &mut st).unwrap();
        }
        assert_eq!(before, s.tensor("w").unwrap().to_le_bytes());
        assert!(st.m.is_empty());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        let err = adam_step(&mut s, &mut AdamState::new(0.1)).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
    }
}
