//! Adam with bias-corrected moments.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::Module;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter of `model` from its accumulated
    /// gradient, then zeroes the gradients. Nothing is changed if any
    /// gradient is non-finite.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        for store in model.stores() {
            for (name, e) in store.iter() {
                if let Some(g) = e.tensor.grad() {
                    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of `{name}` at index {i}")));
                    }
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for store in model.stores_mut() {
            for (name, e) in store.iter_mut() {
                if !e.trainable {
                    continue;
                }
                let Some(grad) = e.tensor.grad().map(<[f64]>::to_vec) else { continue };
                let (m, v) = self
                    .moments
                    .entry(name.to_owned())
                    .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                for (((p, g), m), v) in e.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
                e.tensor.zero_grad();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn store(g: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[g.len()]), true).unwrap();
        s.get_mut("w").unwrap().tensor.accumulate_grad(g);
        s
    }

    #[test]
    fn first_step_is_signed_lr() {
        let g = [0.3, -2.0, 1e-3];
        let mut s = store(&g);
        Adam::new().step(&mut s, 0.01).unwrap();
        let w = s.tensor("w").unwrap();
        for (p, gi) in w.data().iter().zip(&g) {
            let closed = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((p - closed).abs() < 1e-9);
        }
        assert!(w.grad().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = store(&[0.0, 0.0]);
        s.get_mut("w").unwrap().tensor.data_mut()[0] = 1.5;
        Adam::new().step(&mut s, 0.1).unwrap();
        assert_eq!(s.tensor("w").unwrap().data(), &[1.5, 0.0]);
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut s = store(&[1.0, f64::NAN]);
        let mut adam = Adam::new();
        let err = adam.step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.tensor("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(adam.steps(), 0);
    }
}
