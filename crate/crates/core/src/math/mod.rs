//! Dense linear algebra, activations, batch normalization, Adam and
//! finite-difference gradient checking.

mod batchnorm;
mod gradcheck;
mod matrix;
mod ops;
mod param;

pub use batchnorm::{BatchNorm, BatchStats, BnCache, BnMode, BN_EPS, BN_MOMENTUM};
pub use gradcheck::{
    finite_difference_check, relative_error, GradCheckReport, Parameterized, TensorCheck,
};
pub use matrix::{add_outer, dot, mat_t_vec, vec_mat, Matrix};
pub use ops::{
    aggregate, aggregate_backward, relu, relu_backward, relu_scalar, setwise_min,
    setwise_min_backward, sigmoid, softplus, Aggregated, Aggregator, Routing,
};
pub use param::{ParamTensor, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
