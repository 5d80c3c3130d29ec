//! File formats, run configuration and command implementations for the
//! `jemcal` binary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod csvio;
pub mod modelfile;
pub mod report;
