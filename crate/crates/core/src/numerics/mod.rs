//! Dense tensors, reverse-mode differentiation, AdamW and the learning-rate schedule.

mod gradcheck;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{Init, ParamBuilder, ParamId, ParamSpec, ParamStore};
pub use schedule::{LrSchedule, REFERENCE_BATCH};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
