#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod calibration;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod sgld;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use tensor::Tensor;
