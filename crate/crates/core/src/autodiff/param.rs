use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Parameter`]. Clones get a fresh id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    adam: AdamState,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            adam: self.adam.clone(),
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad: vec![0.0; n],
            adam: AdamState::new(n),
        }
    }

    /// Weight matrix `[fan_in × fan_out]` with He-normal entries.
    pub fn he_normal(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self::new(name, Tensor::new(vec![fan_in, fan_out], data).expect("shape"))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    /// Overwrites the value, keeping identity and optimizer state.
    pub fn assign(&mut self, value: &Tensor) -> Result<(), AutodiffError> {
        if value.shape() != self.value.shape() {
            return Err(AutodiffError::Shape(format!(
                "assign to {}: {:?} vs {:?}",
                self.name,
                value.shape(),
                self.value.shape()
            )));
        }
        self.value.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::with_lr(1e-4)
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one bias-corrected Adam update to every parameter, then zeroes
    /// the gradients. Nothing is modified if any gradient is non-finite.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<(), AutodiffError> {
        let params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(p) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(AutodiffError::NonFiniteGradient(p.name.clone()));
        }
        for p in params {
            let st = &mut p.adam;
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let data = p.value.data_mut();
            for k in 0..data.len() {
                let g = p.grad[k];
                st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * g;
                st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[k] / bc1;
                let v_hat = st.v[k] / bc2;
                data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), AutodiffError> {
    Adam {
        lr,
        beta1,
        beta2,
        eps,
    }
    .step(params)
}
