//! Adam over named parameter maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First/second moment estimates plus the step counter.
#[derive(Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. `params` and `grads` must be keyed
/// identically; state is keyed lazily on first use.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    adam_step_with(params, grads, state, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
}

pub fn adam_step_with(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<()> {
    let missing: Vec<String> = params
        .keys()
        .filter(|k| !grads.contains_key(*k))
        .cloned()
        .collect();
    let unexpected: Vec<String> = grads
        .keys()
        .filter(|k| !params.contains_key(*k))
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::KeyMismatch {
            context: "adam_step",
            missing,
            unexpected,
        });
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..n {
            m[i] = beta1 * m[i] + (1.0 - beta1) * gd[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::from_vec(vec![v]));
        m
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // hand-evaluated: m_hat = 1, v_hat = 1, so delta = lr / (1 + eps)
        let mut params = one_param(0.0);
        let grads = one_param(1.0);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        let w = params["w"].data()[0];
        assert!((w - (-0.001)).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = one_param(0.75);
        let grads = one_param(0.0);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(params["w"].data()[0], 0.75);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut params = one_param(0.3);
            let mut state = AdamState::new();
            for step in 0..25 {
                let g = one_param(((step * 7 % 5) as f32) - 2.0);
                adam_step(&mut params, &g, &mut state, 1e-2).unwrap();
            }
            params["w"].data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn key_mismatch_is_an_error() {
        let mut params = one_param(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("other".to_string(), Tensor::from_vec(vec![1.0]));
        let mut state = AdamState::new();
        let err = adam_step(&mut params, &grads, &mut state, 1e-3).unwrap_err();
        assert!(matches!(err, Error::KeyMismatch { .. }));
    }
}
