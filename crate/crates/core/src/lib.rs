//! Resizable vision transformer (one trunk, several token lengths) with a
//! token-length assigner that routes each image to the shortest sequence
//! that still classifies it correctly.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod assigner;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod labeling;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
