//! Batch normalization over the channel axis (axis 1) of `B×C` or `B×C×H×W`
//! inputs.

use super::array::Array;
use super::graph::{Backward, GradAcc, Graph, Var};
use crate::error::{Error, Result};

/// Source of the normalization statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Use the statistics of the current batch (training).
    Batch,
    /// Use stored running statistics (evaluation).
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel mean and population variance of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values per channel that produced the moments.
    pub count: usize,
}

struct BatchNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    inner: usize,
    through_batch: bool,
}

impl BatchNormOp {
    fn channel_of(&self, i: usize) -> usize {
        (i / self.inner) % self.channels
    }
}

impl Backward for BatchNormOp {
    fn backward(&self, grad: &[f64], values: &[Array], acc: &mut GradAcc<'_>) {
        let c = self.channels;
        let gamma = values[self.gamma.0].data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, (&g, &xh)) in grad.iter().zip(&self.xhat).enumerate() {
            let ch = self.channel_of(i);
            dgamma[ch] += g * xh;
            dbeta[ch] += g;
        }
        if let Some(dx) = acc.slot(self.x) {
            if self.through_batch {
                let n = (grad.len() / c) as f64;
                // Σ dxhat = γ·Σ g and Σ dxhat·xhat = γ·Σ g·xhat per channel.
                for (i, d) in dx.iter_mut().enumerate() {
                    let ch = self.channel_of(i);
                    let dxhat = grad[i] * gamma[ch];
                    *d += self.inv_std[ch] / n
                        * (n * dxhat - gamma[ch] * dbeta[ch] - self.xhat[i] * gamma[ch] * dgamma[ch]);
                }
            } else {
                for (i, d) in dx.iter_mut().enumerate() {
                    let ch = self.channel_of(i);
                    *d += grad[i] * gamma[ch] * self.inv_std[ch];
                }
            }
        }
        if let Some(dg) = acc.slot(self.gamma) {
            dg.iter_mut().zip(&dgamma).for_each(|(d, v)| *d += v);
        }
        if let Some(db) = acc.slot(self.beta) {
            db.iter_mut().zip(&dbeta).for_each(|(d, v)| *d += v);
        }
    }
}

impl Graph {
    /// `γ · (x − μ)/sqrt(σ² + eps) + β` per channel. In [`NormStats::Batch`]
    /// mode the gradient flows through the batch mean and variance, and the
    /// batch moments are returned for the running-statistics update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[0] == 0 {
            return Err(Error::dim(
                "batch_norm",
                format!("expected B×C[×…] input, got {shape:?}"),
            ));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "input {shape:?} with gamma {:?} and beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.value(x).data();
        let count = shape[0] * inner;
        let channel_of = |i: usize| (i / inner) % channels;

        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; channels];
                for (i, v) in src.iter().enumerate() {
                    mean[channel_of(i)] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; channels];
                for (i, v) in src.iter().enumerate() {
                    let ch = channel_of(i);
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
                var.iter_mut().for_each(|s| *s /= count as f64);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(moments))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::dim(
                        "batch_norm",
                        format!("running stats of width {} for {channels} channels", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, v) in src.iter().enumerate() {
            let ch = channel_of(i);
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + b[ch];
        }
        let value = Array::new(shape, out)?;
        let through_batch = moments.is_some();
        let y = self.push(
            value,
            &[x, gamma, beta],
            BatchNormOp {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                through_batch,
            },
        );
        Ok((y, moments))
    }
}
