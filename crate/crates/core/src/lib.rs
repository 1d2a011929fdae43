//! Selective state-space sequence kernels and a temporal action detection
//! toolkit built on them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod dmbss;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod params;
pub mod ssm;
pub mod ssta;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Graph, Scalar, Tensor, Var};
