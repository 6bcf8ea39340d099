//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Element;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// Default betas and eps with a custom learning rate.
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    /// Checks hyperparameter ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("Adam lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::invalid(format!("Adam {name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid(format!("Adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Element> AdamState<T> {
    /// Zero-initialized state for a parameter of `n` elements.
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }

    /// Number of update steps applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of `param` from `grad`, in place.
///
/// Uses bias-corrected moment estimates:
/// `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`,
/// `param ← param − lr·m̂/(√v̂ + eps)`.
pub fn adam_step<T: Element>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step size mismatch: param {}, grad {}, state {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("adam_step received a non-finite gradient".into()));
    }
    state.step += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(state.step as i32));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(state.step as i32));
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mhat = state.m[i] / corr1;
        let vhat = state.v[i] / corr2;
        param[i] = param[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_almost_lr() {
        // With gradient 1 and fresh state, bias correction makes m̂ = v̂ = 1,
        // so the step is lr/(1 + eps) ≈ lr.
        let mut param = vec![1.0_f64];
        let mut state = AdamState::new(1);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut param, &[1.0], &mut state, &cfg).unwrap();
        assert!((param[0] - 0.9).abs() < 1e-6, "{}", param[0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn step_direction_follows_gradient_sign() {
        let mut param = vec![0.0_f64, 0.0];
        let mut state = AdamState::new(2);
        let cfg = AdamConfig::default();
        adam_step(&mut param, &[2.5, -0.3], &mut state, &cfg).unwrap();
        assert!(param[0] < 0.0);
        assert!(param[1] > 0.0);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // Minimize (x − 3)² by following its gradient.
        let mut x = vec![0.0_f64];
        let mut state = AdamState::new(1);
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        for _ in 0..2000 {
            let g = 2.0 * (x[0] - 3.0);
            adam_step(&mut x, &[g], &mut state, &cfg).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn rejects_mismatched_sizes_and_bad_grads() {
        let mut param = vec![0.0_f64; 2];
        let mut state = AdamState::new(2);
        let cfg = AdamConfig::default();
        assert!(adam_step(&mut param, &[1.0], &mut state, &cfg).is_err());
        assert!(adam_step(&mut param, &[1.0, f64::NAN], &mut state, &cfg).is_err());
        let bad = AdamConfig { lr: -1.0, ..AdamConfig::default() };
        assert!(adam_step(&mut param, &[1.0, 1.0], &mut state, &bad).is_err());
    }
}
