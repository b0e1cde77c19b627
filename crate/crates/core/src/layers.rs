//! Parameterized building blocks: dense layers, convolutions and batch norm
//! with running statistics.

use rand::Rng;

use crate::autodiff::{Array, BatchMoments, Graph, NormStats, StatUpdate, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

/// Whether batch norm uses batch statistics (and records running updates) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let weight = ps.add_uniform(format!("{name}.weight"), &[n_in, n_out], n_in, rng);
        let bias = ps.add_uniform(format!("{name}.bias"), &[n_out], n_in, rng);
        Self {
            weight,
            bias,
            n_in,
            n_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(self.weight, ps);
        let b = g.param(self.bias, ps);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = ps.add_uniform(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = ps.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(self.weight, ps);
        let b = g.param(self.bias, ps);
        g.conv2d(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add_trainable(format!("{name}.gamma"), Array::filled(&[channels], 1.0)),
            beta: ps.add_trainable(format!("{name}.beta"), Array::zeros(&[channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Array::zeros(&[channels])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Array::filled(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(self.gamma, ps);
        let beta = g.param(self.beta, ps);
        match mode {
            Mode::Train => {
                let (y, moments) = g.batch_norm(x, gamma, beta, BN_EPS, NormStats::Batch)?;
                let BatchMoments { mean, var, count } = moments.expect("batch mode yields moments");
                // Running variance tracks the unbiased estimate.
                let correction = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                g.queue_stat_update(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: mean,
                    batch_var: var.into_iter().map(|v| v * correction).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let stats = NormStats::Running {
                    mean: ps.get(self.running_mean).value.data(),
                    var: ps.get(self.running_var).value.data(),
                };
                Ok(g.batch_norm(x, gamma, beta, BN_EPS, stats)?.0)
            }
        }
    }
}

/// Applies queued running-statistic updates: `r ← (1 − m)·r + m·batch`.
pub fn apply_stat_updates(ps: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
            for (r, b) in ps.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}
