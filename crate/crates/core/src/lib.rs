//! Masked audio-video representation learning at desk scale.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod audio;
pub mod rng;
pub mod tokenizer;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod io;
pub mod config;
pub mod synth;
pub mod evaluation;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{ParamId, ParamStore, Tape, Tensor, Var};
