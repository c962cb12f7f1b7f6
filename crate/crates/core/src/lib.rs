// Negated comparisons are how parameter checks reject NaN alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codebook;
pub mod config;
pub mod dsp;
pub mod error;
pub mod evalpipe;
pub mod nn;
pub mod pipeline;
pub mod reduce;
pub mod sgns;
pub mod store;
pub mod synth;

pub use error::{Error, Result, StoreError};
