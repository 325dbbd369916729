use super::Matrix;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A learnable matrix together with its gradient buffer and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step_count: u64,
}

impl ParamTensor {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Matrix::zeros(rows, cols))
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn grad_is_zero(&self) -> bool {
        self.grad.data().iter().all(|&g| g == 0.0)
    }

    /// One bias-corrected Adam update using the populated gradient, which is
    /// then cleared.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let value = self.value.data_mut();
        let m = self.adam_m.data_mut();
        let v = self.adam_v.data_mut();
        for (i, g) in self.grad.data_mut().iter_mut().enumerate() {
            let gi = *g;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            *g = 0.0;
        }
        Ok(())
    }
}
