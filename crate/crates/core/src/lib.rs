//! Link prediction on n-ary relational facts stored as sets of
//! `role:value` pairs, scored by pairwise relatedness evaluation with an
//! optional type-compatibility branch.

// Row/column index loops mirror the matrix algebra they implement.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
