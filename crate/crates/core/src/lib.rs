// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod error;
pub mod gaussian;
pub mod lattice;
mod modal;
pub mod oracles;
pub mod protocols;
pub mod qtp;

pub use error::{Error, Result};
