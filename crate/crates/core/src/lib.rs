// `!(x > 0.0)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod contraction;
pub mod data;
pub mod error;
pub mod features;
pub mod peps;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{contract, permute_axes, reshape, AxisLabel, DenseTensor, SvdResult};
