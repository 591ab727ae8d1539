//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::model::{Float, Gradients, ModelConfig, ModelParameters};

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("gradient shapes do not match parameters")]
    ShapeMismatch,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidHyper(format!("{self:?}")))
        }
    }
}

/// First/second moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F = f32> {
    pub m: ModelParameters<F>,
    pub v: ModelParameters<F>,
    pub t: u64,
}

impl<F: Float> AdamState<F> {
    pub fn new(config: &ModelConfig) -> Self {
        AdamState {
            m: ModelParameters::zeros(config),
            v: ModelParameters::zeros(config),
            t: 0,
        }
    }

    /// Zero state sized like `params`.
    pub fn for_params(params: &ModelParameters<F>) -> Self {
        Self::new(&params.config())
    }

    /// One Adam update of `params`, in place. Nothing is modified when the
    /// gradient contains a non-finite entry.
    pub fn step(
        &mut self,
        params: &mut ModelParameters<F>,
        grads: &Gradients<F>,
        hyper: &AdamHyper,
    ) -> Result<(), OptimError> {
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(OptimError::ShapeMismatch);
        }
        if !grads.all_finite() {
            return Err(OptimError::NonFiniteGradient);
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = F::of(hyper.beta1);
        let b2 = F::of(hyper.beta2);
        let one_m_b1 = F::of(1.0 - hyper.beta1);
        let one_m_b2 = F::of(1.0 - hyper.beta2);
        let bc1 = F::of(1.0 - hyper.beta1.powi(t));
        let bc2 = F::of(1.0 - hyper.beta2.powi(t));
        let lr = F::of(hyper.lr);
        let eps = F::of(hyper.epsilon);

        let tensors = params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Zero moments for `config`.
pub fn adam_init<F: Float>(config: &ModelConfig) -> AdamState<F> {
    AdamState::new(config)
}
