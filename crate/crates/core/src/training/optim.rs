use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// `eta_min + ½(lr0 − eta_min)(1 + cos(π·t/T))`.
pub fn cosine_lr(t: usize, max_epochs: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if max_epochs == 0 {
        return Err(Error::Config("cosine schedule needs T >= 1".into()));
    }
    if t > max_epochs {
        return Err(Error::Config(format!("epoch {t} beyond schedule length {max_epochs}")));
    }
    let phase = PI * t as f64 / max_epochs as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + phase.cos()))
}

/// Stochastic gradient descent. With `momentum = 0` each step is exactly
/// `p ← p − lr·g`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// changes, so a failed step leaves the store untouched.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[(ParamId, &[f64])], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        for (id, g) in grads {
            let p = ps.get(*id);
            if g.len() != p.value.len() {
                return Err(Error::dim("sgd_step", format!("{}: gradient of length {}", p.name, g.len())));
            }
            if let Some(v) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {v} for parameter {}", p.name)));
            }
        }
        for (id, g) in grads {
            let values = ps.get_mut(*id).value.data_mut();
            if self.momentum == 0.0 {
                for (p, g) in values.iter_mut().zip(g.iter()) {
                    *p -= lr * g;
                }
                continue;
            }
            let v = self.velocity.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            for ((p, g), v) in values.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Array, Graph};

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 150, 0.005, 0.0).unwrap(), 0.005);
        assert!(cosine_lr(150, 150, 0.005, 0.0).unwrap().abs() < 1e-18);
        assert!((cosine_lr(75, 150, 0.005, 0.0).unwrap() - 0.0025).abs() < 1e-15);
        assert!((cosine_lr(10, 10, 0.1, 0.01).unwrap() - 0.01).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, 0.005, 0.0), Err(Error::Config(_))));
    }

    fn store(v: f64) -> (ParamStore, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.add_trainable("p", Array::vector(vec![v]));
        (ps, id)
    }

    #[test]
    fn step_arithmetic() {
        let (mut ps, id) = store(1.0);
        let mut sgd = Sgd::new(0.0);
        sgd.step(&mut ps, &[(id, &[2.0])], 0.0).unwrap();
        assert_eq!(ps.get(id).value.data(), &[1.0]);
        sgd.step(&mut ps, &[(id, &[2.0])], 0.5).unwrap();
        assert_eq!(ps.get(id).value.data(), &[0.0]);
    }

    #[test]
    fn two_steps_on_a_parabola() {
        let (mut ps, id) = store(1.0);
        let mut sgd = Sgd::new(0.0);
        for _ in 0..2 {
            let mut g = Graph::new();
            let p = g.param(id, &ps);
            let sq = g.mul(p, p).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            let grad = g.param_grad(id).unwrap().to_vec();
            sgd.step(&mut ps, &[(id, &grad)], 0.1).unwrap();
        }
        assert!((ps.get(id).value.data()[0] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut ps, id) = store(1.0);
        match Sgd::new(0.0).step(&mut ps, &[(id, &[f64::NAN])], 0.1) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('p')),
            other => panic!("{other:?}"),
        }
        assert_eq!(ps.get(id).value.data(), &[1.0]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let (mut ps, id) = store(0.0);
        let mut sgd = Sgd::new(0.5);
        sgd.step(&mut ps, &[(id, &[1.0])], 1.0).unwrap();
        sgd.step(&mut ps, &[(id, &[1.0])], 1.0).unwrap();
        assert_eq!(ps.get(id).value.data(), &[-2.5]);
    }
}
