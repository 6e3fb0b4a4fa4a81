//! Numerical laboratory for vision-transformer component analysis: exact
//! forward/backward passes, average-rate-of-change (plasticity) estimation,
//! spectral upper bounds, and selective finetuning experiments.

// Dense index arithmetic reads better as explicit loops.
#![allow(clippy::needless_range_loop)]

pub mod bounds;
pub mod error;
pub mod finetune;
pub mod io;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod plasticity;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{NormKind, Tensor};
