use serde::{Deserialize, Serialize};
use stgan_tensor::{Float, ParamStore, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected moment estimates for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients of `store` with learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (p, m) in store.iter().zip(&self.m) {
            if p.grad.shape() != m.shape() || p.value.shape() != m.shape() {
                return Err(Error::Contract(format!(
                    "{}: gradient {:?} does not match parameter {:?}",
                    p.name,
                    p.grad.shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one, step_lr, eps) = (T::one(), T::of(lr / c1), T::of(eps));
        let inv_c2 = T::of(1.0 / c2);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(md).zip(vd) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step_lr * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[1], v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(1.0);
        s.iter_mut().next().unwrap().grad = Tensor::full(&[1], 1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.update(&mut s, 1e-3).unwrap();
        let w = s.iter().next().unwrap().value.data()[0];
        assert!((w - (1.0 - 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_moments() {
        let mut s = store(2.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.update(&mut s, 1e-3).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0], 2.0);

        adam.m[0] = Tensor::full(&[1], 0.4);
        adam.v[0] = Tensor::full(&[1], 0.2);
        adam.update(&mut s, 1e-3).unwrap();
        assert!((adam.m[0].data()[0] - 0.2).abs() < 1e-12);
        assert!((adam.v[0].data()[0] - 0.1998).abs() < 1e-12);
    }
}
