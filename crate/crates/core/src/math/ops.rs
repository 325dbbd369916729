//! Elementwise activations and set-wise reductions with their backward passes.

use super::Matrix;
use crate::error::{Error, Result};

/// `max(0, x)` elementwise.
pub fn relu(x: &Matrix) -> Matrix {
    let data = x.data().iter().map(|&v| relu_scalar(v)).collect();
    Matrix::new(x.rows(), x.cols(), data).expect("shape preserved")
}

#[inline]
pub fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Gradient of [`relu`] given its input `x`; the subgradient at `x <= 0` is 0.
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if x.shape() != upstream.shape() {
        return Err(Error::Dimension(format!(
            "relu input is {}x{} but upstream gradient is {}x{}",
            x.rows(),
            x.cols(),
            upstream.rows(),
            upstream.cols()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::new(x.rows(), x.cols(), data)
}

/// Elementwise reduction applied across a set of vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregator {
    Min,
    Max,
    Mean,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Min => "min",
            Aggregator::Max => "emax",
            Aggregator::Mean => "emean",
        }
    }
}

/// Result of reducing a set of vectors, plus what the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub values: Vec<f64>,
    pub routing: Routing,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    /// Index of the (first) input that attained each coordinate.
    Selected(Vec<usize>),
    /// Gradient splits evenly over this many inputs.
    Uniform(usize),
}

/// Reduces the rows of `vectors` coordinate by coordinate.
///
/// Ties under `Min`/`Max` go to the lowest row index.
pub fn aggregate(vectors: &Matrix, agg: Aggregator) -> Result<Aggregated> {
    if vectors.rows() == 0 {
        return Err(Error::InvalidInput(
            "cannot aggregate an empty set of vectors".into(),
        ));
    }
    let d = vectors.cols();
    match agg {
        Aggregator::Min | Aggregator::Max => {
            let mut values = vectors.row(0).to_vec();
            let mut arg = vec![0usize; d];
            for r in 1..vectors.rows() {
                for (t, &x) in vectors.row(r).iter().enumerate() {
                    let better = match agg {
                        Aggregator::Min => x < values[t],
                        _ => x > values[t],
                    };
                    if better {
                        values[t] = x;
                        arg[t] = r;
                    }
                }
            }
            Ok(Aggregated {
                values,
                routing: Routing::Selected(arg),
            })
        }
        Aggregator::Mean => {
            let mut values = vec![0.0; d];
            for r in 0..vectors.rows() {
                for (v, &x) in values.iter_mut().zip(vectors.row(r)) {
                    *v += x;
                }
            }
            let n = vectors.rows() as f64;
            values.iter_mut().for_each(|v| *v /= n);
            Ok(Aggregated {
                values,
                routing: Routing::Uniform(vectors.rows()),
            })
        }
    }
}

/// Distributes `upstream` back over the `n_inputs` reduced vectors.
pub fn aggregate_backward(routing: &Routing, upstream: &[f64], n_inputs: usize) -> Matrix {
    let d = upstream.len();
    let mut grad = Matrix::zeros(n_inputs, d);
    match routing {
        Routing::Selected(arg) => {
            for (t, (&r, &g)) in arg.iter().zip(upstream).enumerate() {
                grad.set(r, t, g);
            }
        }
        Routing::Uniform(n) => {
            let share = 1.0 / *n as f64;
            for r in 0..n_inputs {
                for (t, &g) in upstream.iter().enumerate() {
                    grad.set(r, t, g * share);
                }
            }
        }
    }
    grad
}

/// Elementwise minimum over a set of equal-length vectors, with argmins.
pub fn setwise_min(vectors: &Matrix) -> Result<(Vec<f64>, Vec<usize>)> {
    let out = aggregate(vectors, Aggregator::Min)?;
    match out.routing {
        Routing::Selected(arg) => Ok((out.values, arg)),
        Routing::Uniform(_) => unreachable!("min always selects"),
    }
}

/// Gradient of [`setwise_min`]: coordinate `t` flows only to row `argmin[t]`.
pub fn setwise_min_backward(argmin: &[usize], upstream: &[f64], n_inputs: usize) -> Matrix {
    aggregate_backward(&Routing::Selected(argmin.to_vec()), upstream, n_inputs)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&m(&[&[-1.0, 0.0, 2.0]])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&m(&[&[-1.0, -3.0], &[-0.5, -9.0]])), Matrix::zeros(2, 2));
        let g = relu_backward(&m(&[&[-1.0, 2.0]]), &m(&[&[1.0, 1.0]])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn min_examples() {
        let (v, arg) = setwise_min(&m(&[&[4.0, -2.0, 7.0]])).unwrap();
        assert_eq!(v, vec![4.0, -2.0, 7.0]);
        assert_eq!(arg, vec![0, 0, 0]);

        let (v, arg) = setwise_min(&m(&[&[1.0, 5.0], &[3.0, 2.0]])).unwrap();
        assert_eq!(v, vec![1.0, 2.0]);
        assert_eq!(arg, vec![0, 1]);
    }

    #[test]
    fn min_ties_go_to_lowest_index() {
        let (_, arg) = setwise_min(&m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.5, 0.0]])).unwrap();
        assert_eq!(arg, vec![2, 0]);
    }

    #[test]
    fn empty_set_is_invalid() {
        assert!(matches!(
            setwise_min(&Matrix::zeros(0, 3)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn min_matches_scan_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let d = 7;
        let data: Vec<f64> = (0..100 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vs = Matrix::new(100, d, data).unwrap();
        let (v, arg) = setwise_min(&vs).unwrap();
        for t in 0..d {
            let mut best = f64::INFINITY;
            let mut best_r = usize::MAX;
            for r in 0..100 {
                if vs.get(r, t) < best {
                    best = vs.get(r, t);
                    best_r = r;
                }
            }
            assert_eq!(v[t], best);
            assert_eq!(arg[t], best_r);
        }
    }

    #[test]
    fn ablation_reductions() {
        let single = m(&[&[0.3, -0.7]]);
        for agg in [Aggregator::Max, Aggregator::Mean] {
            assert_eq!(aggregate(&single, agg).unwrap().values, vec![0.3, -0.7]);
        }
        let two = m(&[&[1.0, 5.0], &[3.0, 2.0]]);
        assert_eq!(aggregate(&two, Aggregator::Max).unwrap().values, vec![3.0, 5.0]);
        assert_eq!(aggregate(&two, Aggregator::Mean).unwrap().values, vec![2.0, 3.5]);
    }

    #[test]
    fn mean_gradient_splits_evenly() {
        let out = aggregate(&Matrix::zeros(4, 2), Aggregator::Mean).unwrap();
        let g = aggregate_backward(&out.routing, &[1.0, -2.0], 4);
        for r in 0..4 {
            assert_eq!(g.row(r), &[0.25, -0.5]);
        }
    }

    #[test]
    fn softplus_anchor_and_monotone() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-5.0) < softplus(0.0) && softplus(0.0) < softplus(5.0));
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0) == 800.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..8, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(x in matrix_strategy()) {
            let once = relu(&x);
            prop_assert_eq!(relu(&once), once);
        }

        #[test]
        fn min_is_lower_bound_and_routes_all_gradient(
            x in matrix_strategy(),
            g in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let (v, arg) = setwise_min(&x).unwrap();
            for r in 0..x.rows() {
                for t in 0..x.cols() {
                    prop_assert!(v[t] <= x.get(r, t));
                }
            }
            let up = &g[..x.cols()];
            let routed = setwise_min_backward(&arg, up, x.rows());
            for t in 0..x.cols() {
                let total: f64 = (0..x.rows()).map(|r| routed.get(r, t)).sum();
                prop_assert_eq!(total, up[t]);
            }
        }
    }
}
