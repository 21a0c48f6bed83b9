//! Minimal reverse-mode autodiff, parameter storage, and optimization.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{AdamW, CosineSchedule};
pub use params::{ParamId, ParamStore};
pub use tape::{log_softmax_rows, softmax_rows, Tape, Var};
