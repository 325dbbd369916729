//! Per-channel batch normalization over the rows of an activation matrix.

use super::{Matrix, ParamTensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    mode: BnMode,
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: ParamTensor::new(Matrix::filled(1, channels, 1.0)),
            beta: ParamTensor::zeros(1, channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Eval-mode normalization of a single row.
    pub fn normalize_row(&self, z: &[f64]) -> Vec<f64> {
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        z.iter()
            .enumerate()
            .map(|(c, &x)| {
                let inv_std = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
                gamma[c] * ((x - self.running_mean[c]) * inv_std) + beta[c]
            })
            .collect()
    }

    /// Returns the normalized activations, the backward cache and, in train
    /// mode, the batch statistics to fold into the running estimates.
    pub fn forward(&self, x: &Matrix, mode: BnMode) -> Result<(Matrix, BnCache, Option<BatchStats>)> {
        let c = self.channels();
        if x.cols() != c {
            return Err(Error::Dimension(format!(
                "batchnorm has {c} channels but input has {} columns",
                x.cols()
            )));
        }
        let n = x.rows();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        match mode {
            BnMode::Eval => {
                let mut x_hat = Matrix::zeros(n, c);
                let inv_std: Vec<f64> = self
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                let mut y = Matrix::zeros(n, c);
                for r in 0..n {
                    for ch in 0..c {
                        let xh = (x.get(r, ch) - self.running_mean[ch]) * inv_std[ch];
                        x_hat.set(r, ch, xh);
                        y.set(r, ch, gamma[ch] * xh + beta[ch]);
                    }
                }
                Ok((y, BnCache { mode, x_hat, inv_std }, None))
            }
            BnMode::Train => {
                if n == 0 {
                    return Err(Error::InvalidInput("batchnorm on an empty batch".into()));
                }
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ch in 0..c {
                        let d = x.get(r, ch) - mean[ch];
                        var[ch] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut x_hat = Matrix::zeros(n, c);
                let mut y = Matrix::zeros(n, c);
                for r in 0..n {
                    for ch in 0..c {
                        let xh = (x.get(r, ch) - mean[ch]) * inv_std[ch];
                        x_hat.set(r, ch, xh);
                        y.set(r, ch, gamma[ch] * xh + beta[ch]);
                    }
                }
                Ok((
                    y,
                    BnCache { mode, x_hat, inv_std },
                    Some(BatchStats { mean, var }),
                ))
            }
        }
    }

    /// Accumulates γ/β gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache, upstream: &Matrix) -> Result<Matrix> {
        if upstream.shape() != cache.x_hat.shape() {
            return Err(Error::Dimension(format!(
                "batchnorm cache is {}x{} but upstream gradient is {}x{}",
                cache.x_hat.rows(),
                cache.x_hat.cols(),
                upstream.rows(),
                upstream.cols()
            )));
        }
        let (n, c) = upstream.shape();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for r in 0..n {
            for ch in 0..c {
                let dy = upstream.get(r, ch);
                sum_dy[ch] += dy;
                sum_dy_xhat[ch] += dy * cache.x_hat.get(r, ch);
            }
        }
        {
            let dg = self.gamma.grad.data_mut();
            let db = self.beta.grad.data_mut();
            for ch in 0..c {
                dg[ch] += sum_dy_xhat[ch];
                db[ch] += sum_dy[ch];
            }
        }
        let gamma = self.gamma.value.data();
        let mut dx = Matrix::zeros(n, c);
        match cache.mode {
            BnMode::Eval => {
                for r in 0..n {
                    for ch in 0..c {
                        dx.set(r, ch, upstream.get(r, ch) * gamma[ch] * cache.inv_std[ch]);
                    }
                }
            }
            BnMode::Train => {
                let nf = n as f64;
                for r in 0..n {
                    for ch in 0..c {
                        let dy = upstream.get(r, ch);
                        let xh = cache.x_hat.get(r, ch);
                        let v = gamma[ch] * cache.inv_std[ch] / nf
                            * (nf * dy - sum_dy[ch] - xh * sum_dy_xhat[ch]);
                        dx.set(r, ch, v);
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        for ch in 0..self.channels() {
            self.running_mean[ch] =
                BN_MOMENTUM * self.running_mean[ch] + (1.0 - BN_MOMENTUM) * stats.mean[ch];
            self.running_var[ch] =
                BN_MOMENTUM * self.running_var[ch] + (1.0 - BN_MOMENTUM) * stats.var[ch];
        }
    }
}
