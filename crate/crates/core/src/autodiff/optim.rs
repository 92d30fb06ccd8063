use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Adam hyperparameters with decoupled weight decay and linear warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 1e-4,
            warmup_steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate must be > 0 and weight decay >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `base_lr · min(1, step / warmup_steps)`; no warmup when it is zero.
    pub fn effective_lr(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.base_lr
        } else {
            self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step_count: usize,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.config.effective_lr(self.step_count)
    }

    /// One Adam update. Gradients are validated before anything is touched,
    /// so a rejected step leaves params and state unchanged.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                &[params.len()],
                &[grads.len()],
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.get(i).len() {
                return Err(Error::shape("adam_step", params.get(i).shape(), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad(params.name(i).to_string()));
            }
        }
        self.step_count += 1;
        let c = &self.config;
        let lr = c.effective_lr(self.step_count);
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.epsilon);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                p[j] = p[j] * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.push("w", Tensor::vector(vec![v, -v]));
        p
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut p = one_param(0.7);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        for _ in 0..5 {
            st.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        }
        assert_eq!(p.get(0).data(), &[0.7, -0.7]);
    }

    #[test]
    fn warmup_halfway_halves_lr() {
        let cfg = AdamConfig {
            base_lr: 1e-4,
            warmup_steps: 10_000,
            ..AdamConfig::default()
        };
        assert_eq!(cfg.effective_lr(5_000), 0.5e-4);
        assert_eq!(cfg.effective_lr(20_000), 1e-4);
        let none = AdamConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(none.effective_lr(1), 1e-4);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = ParamStore::<f64>::new();
        p.push("x", Tensor::scalar(1.0));
        let cfg = AdamConfig {
            base_lr: 1e-2,
            warmup_steps: 10,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        let mut prev = p.get(0).item();
        for _ in 0..200 {
            st.step(&mut p, &[vec![0.3]]).unwrap();
            let now = p.get(0).item();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one_param(1.0);
        let mut st = OptimizerState::new(AdamConfig::default(), &p);
        let err = st.step(&mut p, &[vec![f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGrad(ref n) if n == "w"));
        assert_eq!(st.step_count, 0);
        assert_eq!(p.get(0).data(), &[1.0, -1.0]);
    }

    #[test]
    fn decay_is_decoupled() {
        // With zero gradient only the multiplicative decay acts.
        let mut p = ParamStore::<f64>::new();
        p.push("x", Tensor::scalar(2.0));
        let cfg = AdamConfig {
            base_lr: 0.1,
            weight_decay: 0.5,
            warmup_steps: 0,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        st.step(&mut p, &[vec![0.0]]).unwrap();
        assert!((p.get(0).item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
