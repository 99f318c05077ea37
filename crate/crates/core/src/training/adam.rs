//! Bias-corrected Adam.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        Self { lr, beta1: BETA1, beta2: BETA2, eps: EPSILON, step: 0, m: zeros(), v: zeros() }
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.v[param]
    }

    /// One update from the gradients currently accumulated in `store`.
    /// Gradients are left in place; callers zero them before the next pass.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter().enumerate() {
            if p.grad.len() != self.m[i].len() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
            if let Some(k) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::MissingGradient(format!("{}[{k}] is not finite", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
