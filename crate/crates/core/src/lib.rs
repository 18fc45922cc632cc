//! Multiscale entropic training of hierarchical networks that learn
//! one-dimensional diffeomorphisms as a ladder of near-identity rungs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod entropy;
pub mod error;
pub mod io;
pub mod ladder;
pub mod model;
pub mod risk;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
