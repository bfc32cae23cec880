//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; numel],
            second_moment: vec![0.0; numel],
            step_count: 0,
        }
    }
}

/// One Adam step on `param` in place.
///
/// Gradients are checked for finiteness before anything is modified, so a
/// rejected update leaves both the parameter and the state untouched.
pub fn adam_update(
    name: &str,
    param: &mut Tensor,
    grad: &[f32],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.beta1 > 0.0 && cfg.beta1 < 1.0 && cfg.beta2 > 0.0 && cfg.beta2 < 1.0) {
        return Err(Error::invalid(format!(
            "adam betas must lie in (0, 1), got ({}, {})",
            cfg.beta1, cfg.beta2
        )));
    }
    let n = param.numel();
    if grad.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::ShapeMismatch {
            op: "adam_update",
            lhs: param.shape().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}` at index {i}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let data = param.data_mut();
    for i in 0..n {
        let g = grad[i];
        let m = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // Step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        let mut p = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = [0.5f32, -3.0, 20.0];
        let mut st = AdamState::new(3);
        adam_update("p", &mut p, &g, &mut st, &cfg).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let moved = 1.0 - p.data()[i];
            let want = cfg.lr * gi.signum();
            assert!((moved - want).abs() < 1e-6, "{moved} vs {want}");
        }
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_keeps_param() {
        let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(2);
        adam_update("p", &mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_second_step_not_larger() {
        // With a constant gradient, m_hat = g at every step while v_hat = g^2
        // too, so the update magnitude stays at lr (up to eps); it never grows.
        let cfg = AdamConfig::default();
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut st = AdamState::new(1);
        adam_update("p", &mut p, &[0.2], &mut st, &cfg).unwrap();
        let first = -p.data()[0];
        let mid = p.data()[0];
        adam_update("p", &mut p, &[0.2], &mut st, &cfg).unwrap();
        let second = mid - p.data()[0];
        assert!(second <= first + 1e-9, "{second} > {first}");
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut st = AdamState::new(2);
        let err = adam_update("theta/head/w", &mut p, &[0.0, f32::NAN], &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("theta/head/w"));
        assert_eq!(st.step_count, 0);
    }
}
