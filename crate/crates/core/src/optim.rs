//! Adam optimizer with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CsiError;
use crate::params::{ParamId, ParameterSet};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.eps > 0.0) {
            return Err(CsiError::Config("adam lr and eps must be positive".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(CsiError::Config("adam betas must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    config: AdamConfig,
    /// (parameter, first moment, second moment); shapes match the parameter.
    slots: Vec<(ParamId, Vec<S>, Vec<S>)>,
    /// Completed steps; increments by exactly one per `step`.
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    /// Manage every trainable parameter of `params`.
    pub fn new(params: &ParameterSet<S>, config: AdamConfig) -> Result<Self> {
        Self::for_ids(params, params.trainable_ids(), config)
    }

    /// Manage a subset (used by the decoder-only fine-tuning pass).
    pub fn for_ids(
        params: &ParameterSet<S>,
        ids: Vec<ParamId>,
        config: AdamConfig,
    ) -> Result<Self> {
        config.validate()?;
        let slots = ids
            .into_iter()
            .map(|id| {
                let n = params.tensor(id).numel();
                (id, vec![S::ZERO; n], vec![S::ZERO; n])
            })
            .collect();
        Ok(AdamState {
            config,
            slots,
            t: 0,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One Adam update over the managed parameters. Gradients must be
    /// populated and are left untouched (the caller clears them).
    pub fn step(&mut self, params: &mut ParameterSet<S>) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        let b1 = S::from_f64(c.beta1);
        let b2 = S::from_f64(c.beta2);
        let one_m_b1 = S::from_f64(1.0 - c.beta1);
        let one_m_b2 = S::from_f64(1.0 - c.beta2);
        // Fold both bias corrections into the step size.
        let alpha = S::from_f64(c.lr * libm::sqrt(bc2) / bc1);
        let eps = S::from_f64(c.eps * libm::sqrt(bc2));

        for (id, m, v) in &mut self.slots {
            let entry = params.get_mut(*id);
            let grad = entry.tensor.grad.as_ref().ok_or_else(|| {
                CsiError::State(format!("missing gradient on parameter {}", entry.name))
            })?;
            debug_assert_eq!(grad.len(), m.len());
            let grad = grad.clone();
            for (((w, g), mi), vi) in entry
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_m_b1 * *g;
                *vi = b2 * *vi + one_m_b2 * *g * *g;
                *w -= alpha * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn one_param(values: &[f64]) -> (ParameterSet<f64>, ParamId) {
        let mut p = ParameterSet::new();
        let id = p
            .add("w", vec![values.len()], true, Init::Constant(0.0))
            .unwrap();
        p.get_mut(id).tensor.data_mut().copy_from_slice(values);
        (p, id)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut params, id) = one_param(&[0.3, -0.7, 2.0]);
        params.get_mut(id).tensor.grad = Some(vec![0.0; 3]);
        let mut adam = AdamState::new(&params, AdamConfig::default()).unwrap();
        adam.step(&mut params).unwrap();
        assert_eq!(adam.t, 1);
        assert_eq!(params.tensor(id).data(), &[0.3, -0.7, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, step 1 collapses to lr * g/(|g| + eps') .
        for g in [3.7, -0.004, 12.0] {
            let (mut params, id) = one_param(&[0.0]);
            params.get_mut(id).tensor.grad = Some(vec![g]);
            let mut adam = AdamState::new(&params, AdamConfig::default()).unwrap();
            adam.step(&mut params).unwrap();
            let got = params.tensor(id).data()[0];
            assert!(
                (got + 1e-3 * g.signum()).abs() < 1e-6,
                "g={g} got={got}"
            );
        }
    }

    #[test]
    fn matches_hand_stepped_trace() {
        // Two steps on a 3-vector, stepped by hand with the textbook update.
        let w0 = [1.0, -2.0, 0.5];
        let g1 = [0.1, -0.2, 0.3];
        let g2 = [-0.05, 0.15, 0.25];
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);

        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        let mut w = w0;
        for (t, g) in [(1, g1), (2, g2)] {
            for i in 0..3 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }

        let (mut params, id) = one_param(&w0);
        let mut adam = AdamState::new(&params, AdamConfig::default()).unwrap();
        for g in [g1, g2] {
            params.get_mut(id).tensor.grad = Some(g.to_vec());
            adam.step(&mut params).unwrap();
            params.zero_grads();
        }
        // Folding the corrections into the step size is algebraically the
        // textbook update, so agreement is tight.
        for (a, b) in params.tensor(id).data().iter().zip(&w) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(adam.t, 2);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let (mut params, _) = one_param(&[1.0]);
        let mut adam = AdamState::new(&params, AdamConfig::default()).unwrap();
        let err = adam.step(&mut params).unwrap_err();
        match err {
            CsiError::State(m) => assert!(m.contains('w'), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let params = ParameterSet::<f64>::new();
        for cfg in [
            AdamConfig { beta1: 1.0, ..Default::default() },
            AdamConfig { beta2: 0.0, ..Default::default() },
            AdamConfig { lr: 0.0, ..Default::default() },
        ] {
            assert!(AdamState::new(&params, cfg).is_err());
        }
    }
}
