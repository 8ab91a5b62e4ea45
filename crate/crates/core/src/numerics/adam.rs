use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::{Float, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, slot: usize) -> &[T] {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[T] {
        &self.v[slot]
    }

    /// One bias-corrected Adam update. Parameters without an entry in `grads`
    /// see a zero gradient. Any non-finite gradient refuses the whole step and
    /// leaves both the parameters and the moments untouched.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        names: &[String],
        grads: &Gradients<T>,
        config: &AdamConfig,
        lr: f64,
    ) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::InvalidTensor(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (slot, g) in grads.iter() {
            if slot >= params.len() || g.len() != params[slot].len() {
                return Err(Error::InvalidTensor(format!(
                    "gradient slot {slot} does not match parameters"
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                let name = names
                    .get(slot)
                    .cloned()
                    .unwrap_or_else(|| format!("#{slot}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (config.beta1, config.beta2);
        let correct1 = 1.0 - b1.powi(t);
        let correct2 = 1.0 - b2.powi(t);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));

        for (slot, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let g = grads.get(slot);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = tb1 * m[i] + ob1 * gi;
                v[i] = tb2 * v[i] + ob2 * gi * gi;
                let m_hat = m[i].as_f64() / correct1;
                let v_hat = v[i].as_f64() / correct2;
                let delta = lr * m_hat / (v_hat.sqrt() + config.eps);
                *w = *w - T::lit(delta);
            }
        }
        Ok(())
    }
}
