//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> AdamState<T> {
    /// Moment buffers are allocated (as zeros) on the first update.
    pub fn new() -> Self {
        AdamState {
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in order, using the gradient at the same
    /// position in `grads`.
    pub fn update<'a, I>(&mut self, params: I, grads: &[Tensor<T>], cfg: &AdamConfig) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor<T>>,
    {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} vs gradient {}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(&params).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::Shape("parameter set changed between Adam steps".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let c1 = T::one() / (T::one() - T::lit(cfg.beta1.powi(t)));
        let c2 = T::one() / (T::one() - T::lit(cfg.beta2.powi(t)));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let wd = T::lit(cfg.weight_decay);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] * c1;
                let vhat = v[i] * c2;
                let mut delta = mhat / (vhat.sqrt() + eps);
                if cfg.weight_decay > 0.0 {
                    delta = delta + wd * *w;
                }
                *w = *w - lr * delta;
            }
        }
        Ok(())
    }
}
