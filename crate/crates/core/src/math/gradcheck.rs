//! Central finite-difference verification of analytic gradients.

use super::ParamTensor;

/// A collection of named parameter tensors that can be perturbed one entry at
/// a time.
pub trait Parameterized {
    fn tensor_count(&self) -> usize;
    fn tensor(&self, index: usize) -> (&str, &ParamTensor);
    fn tensor_mut(&mut self, index: usize) -> &mut ParamTensor;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub flagged: usize,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> usize {
        self.tensors.iter().map(|t| t.flagged).sum()
    }

    pub fn passed(&self) -> bool {
        self.flagged() == 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradients already stored in `params` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every tensor.
///
/// `loss` must be deterministic and must not read the gradient buffers.
pub fn finite_difference_check<P, F>(params: &mut P, mut loss: F, h: f64, tol: f64) -> GradCheckReport
where
    P: Parameterized,
    F: FnMut(&P) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut tensors = Vec::with_capacity(params.tensor_count());
    for ti in 0..params.tensor_count() {
        let (name, tensor) = params.tensor(ti);
        let name = name.to_string();
        let entries = tensor.value.len();
        let mut check = TensorCheck {
            name,
            max_rel_error: 0.0,
            flagged: 0,
            entries,
        };
        for e in 0..entries {
            let original = params.tensor(ti).1.value.data()[e];
            params.tensor_mut(ti).value.data_mut()[e] = original + h;
            let up = loss(params);
            params.tensor_mut(ti).value.data_mut()[e] = original - h;
            let down = loss(params);
            params.tensor_mut(ti).value.data_mut()[e] = original;
            let numeric = (up - down) / (2.0 * h);
            let analytic = params.tensor(ti).1.grad.data()[e];
            let rel = relative_error(analytic, numeric);
            if rel > tol {
                check.flagged += 1;
            }
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        tensors.push(check);
    }
    GradCheckReport { tensors, tolerance: tol }
}
