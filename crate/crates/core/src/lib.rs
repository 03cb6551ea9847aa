//! Online joint state and measurement-noise covariance estimation for linear
//! systems driven by colored noise.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dem;
pub mod error;
pub mod genalg;
pub mod harness;
pub mod linalg;
pub mod noise;
pub mod plant;
pub mod vbm;

pub use error::{Error, Result};
