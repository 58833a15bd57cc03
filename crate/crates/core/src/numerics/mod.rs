//! Dense tensor kernels, their vjps, and gradient checking.
//!
//! Oracles and tests run at f64; training loops may use f32. All kernels are
//! pure functions over immutable inputs.

pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport};
pub use tensor::{Dtype, Scalar, Tensor};
