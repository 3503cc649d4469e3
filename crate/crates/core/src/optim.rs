//! Adam with stepwise learning-rate attenuation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor};

/// Optimizer hyperparameters. The learning rate decays by `decay_rate`
/// every `decay_every` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_rate: 0.95,
            decay_every: 1000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0,1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay_rate must lie in (0,1], got {}",
                self.decay_rate
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stepped exponential attenuation: lr(t) = base · rateᶠˡᵒᵒʳ⁽ᵗ/ᵉᵛᵉʳʸ⁾, where
/// t counts completed optimizer steps.
pub fn lr_schedule(config: &OptimConfig, step: u64) -> f64 {
    config.base_lr * config.decay_rate.powi((step / config.decay_every) as i32)
}

/// Adam moments, step counter and schedule parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Completed steps.
    pub step: u64,
    pub config: OptimConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], config: OptimConfig) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            config,
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        lr_schedule(&self.config, self.step)
    }
}

/// One Adam update over a flat parameter list.
///
/// t ← t+1; m ← β₁m + (1−β₁)g; v ← β₂v + (1−β₂)g²; then with bias-corrected
/// m̂ = m/(1−β₁ᵗ) and v̂ = v/(1−β₂ᵗ): param ← param − lr(t)·m̂/(√v̂+ε).
/// The learning rate is evaluated from the schedule at the step count before
/// the increment. Any non-finite gradient aborts before touching state;
/// `names` is consulted only for that diagnostic.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    names: &[&str],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != names.len() {
        return Err(Error::Config(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((param, grad), name) in params.iter().zip(grads.iter()).zip(names.iter()) {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "adam_step: {name} has shape {} but gradient {}",
                fmt_shape(param.shape()),
                fmt_shape(grad.shape())
            )));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }

    let lr = lr_schedule(&state.config, state.step);
    state.step += 1;
    let t = state.step as i32;
    let c = &state.config;
    let corr1 = T::from_f64(1.0 / (1.0 - c.beta1.powi(t)));
    let corr2 = T::from_f64(1.0 / (1.0 - c.beta2.powi(t)));
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let one_m_b1 = T::ONE - b1;
    let one_m_b2 = T::ONE - b2;
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(c.epsilon);

    for (i, param) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &gi), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_m_b1 * gi;
            *vi = b2 * *vi + one_m_b2 * gi * gi;
            let m_hat = *mi * corr1;
            let v_hat = *vi * corr2;
            *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_at_zero_is_base() {
        let c = OptimConfig::default();
        assert_eq!(lr_schedule(&c, 0), 1e-3);
    }

    #[test]
    fn schedule_degenerate_rate_is_constant() {
        let c = OptimConfig {
            decay_rate: 1.0,
            ..OptimConfig::default()
        };
        assert_eq!(lr_schedule(&c, 123_456), 1e-3);
    }

    #[test]
    fn schedule_two_decays_at_2000() {
        let c = OptimConfig::default();
        let lr = lr_schedule(&c, 2000);
        assert!((lr - 9.025e-4).abs() < 1e-12, "{lr}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_fn(&[4], |i| i as f64);
        let before = p.clone();
        let g = Tensor::zeros(&[4]);
        let mut state = AdamState::new(&[&p], OptimConfig::default());
        adam_step(&mut [&mut p], &[g], &["p"], &mut state).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With ε→0, m̂/√v̂ = sign(g) on the first step.
        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(0.37);
        let config = OptimConfig {
            epsilon: 1e-16,
            ..OptimConfig::default()
        };
        let mut state = AdamState::new(&[&p], config);
        adam_step(&mut [&mut p], &[g], &["p"], &mut state).unwrap();
        assert!((p.item() + 1e-3).abs() < 1e-9, "{}", p.item());
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = Tensor::from_fn(&[3], |i| i as f64 * 0.5);
            let mut state = AdamState::new(&[&p], OptimConfig::default());
            for s in 0..20 {
                let g = Tensor::from_fn(&[3], |i| ((i + s) as f64 * 0.7).sin());
                adam_step(&mut [&mut p], &[g], &["p"], &mut state).unwrap();
            }
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut p = Tensor::scalar(1.0f64);
        let g = Tensor::scalar(f64::NAN);
        let mut state = AdamState::new(&[&p], OptimConfig::default());
        let err = adam_step(&mut [&mut p], &[g], &["k0.fc.weight"], &mut state).unwrap_err();
        assert!(err.to_string().contains("k0.fc.weight"));
        assert_eq!(state.step, 0);
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new(&[&p], OptimConfig::default());
        assert!(adam_step(&mut [&mut p], &[g], &["p"], &mut state).is_err());
    }
}
