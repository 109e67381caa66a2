//! Adaptive-moment (Adam) optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// One Adam update applied in place. Parameters are independent of each
/// other; `params`, `grads` and the moment lists are matched by position.
pub fn optimizer_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, lr: f64, hyper: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "moment count matches parameters");
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mk, &gk) in m.iter_mut().zip(g) {
            *mk = hyper.beta1 * *mk + (1.0 - hyper.beta1) * gk;
        }
        let v = state.v[i].data_mut();
        for (vk, &gk) in v.iter_mut().zip(g) {
            *vk = hyper.beta2 * *vk + (1.0 - hyper.beta2) * gk * gk;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (k, pk) in p.data_mut().iter_mut().enumerate() {
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *pk -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new([&p]);
        optimizer_step(&mut [&mut p], &[&g], &mut st, 0.1, &AdamConfig::default());
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_scalar_step() {
        // m = 0.1 g, v = 0.001 g^2; after bias correction m_hat = g, v_hat = g^2,
        // so the first step is lr * g / (|g| + eps).
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.5);
        let mut st = AdamState::new([&p]);
        let h = AdamConfig::default();
        optimizer_step(&mut [&mut p], &[&g], &mut st, 0.01, &h);
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn parameter_order_does_not_matter() {
        let h = AdamConfig::default();
        let (a0, b0) = (Tensor::vector(vec![1.0, 2.0]), Tensor::scalar(-3.0));
        let (ga, gb) = (Tensor::vector(vec![0.3, -0.1]), Tensor::scalar(2.0));
        let (mut a1, mut b1) = (a0.clone(), b0.clone());
        let mut s1 = AdamState::new([&a1, &b1]);
        let (mut a2, mut b2) = (a0.clone(), b0.clone());
        let mut s2 = AdamState::new([&b2, &a2]);
        for _ in 0..3 {
            optimizer_step(&mut [&mut a1, &mut b1], &[&ga, &gb], &mut s1, 0.05, &h);
            optimizer_step(&mut [&mut b2, &mut a2], &[&gb, &ga], &mut s2, 0.05, &h);
        }
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }
}
