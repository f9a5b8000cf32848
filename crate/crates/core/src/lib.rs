// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binio;
pub mod cli;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck_suite;
pub mod nn;
pub mod sim;
pub mod tensor;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
