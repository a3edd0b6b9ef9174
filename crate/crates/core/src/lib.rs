#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
