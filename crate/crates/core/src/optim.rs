//! Adaptive-moment (Adam) optimizer over [`DnnParams`].

use serde::{Deserialize, Serialize};

use crate::dnn::{DnnGrads, DnnParams};
use crate::error::{KwsError, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &DnnParams<T>) -> Self {
        let n = params.num_params();
        Self {
            config,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected update. Fails without touching `params` if the
    /// gradient or the resulting parameters would be non-finite.
    pub fn step(&mut self, params: &mut DnnParams<T>, grads: &DnnGrads<T>) -> Result<()> {
        let flat = grads.to_flat();
        if flat.len() != self.m.len() {
            return Err(KwsError::shape("gradient size differs from optimizer state"));
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(KwsError::invalid("non-finite gradient"));
        }
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let t = (self.steps + 1) as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.eps);

        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut next = params.clone();
        next.zip_apply(grads, |i, p, g| {
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
        if !next.is_finite() {
            return Err(KwsError::invalid("optimizer step produced non-finite parameters"));
        }
        *params = next;
        self.m = m;
        self.v = v;
        self.steps += 1;
        Ok(())
    }
}
