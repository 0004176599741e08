// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod engine;
pub mod error;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, FieldError, Result};
pub use tensor::Tensor;
