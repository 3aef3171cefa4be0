//! Adam optimizer over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::numeric(format!("adam gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", 0.7);
        let mut s = AdamState::default();
        adam_step(&mut p, &one("w", 0.0), &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(p["w"].data(), &[0.7]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1 and v_hat = 1 after bias correction
        let mut p = one("w", 0.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &one("w", 1.0), &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        assert!((p["w"].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = one("w", 0.5);
        let mut s = AdamState::default();
        let err = adam_step(&mut p, &one("w", f64::NAN), &mut s, &AdamConfig::with_lr(0.1)).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert_eq!(p["w"].data(), &[0.5]);
        assert_eq!(s, AdamState::default());
    }
}
