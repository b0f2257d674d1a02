//! Class-incremental learning at desk scale.
//!
//! The crate trains a small MLP classifier on a stream of tasks, each
//! introducing `m` new classes, while a bounded exemplar memory keeps a few
//! samples of every class seen so far. It implements the separated-softmax
//! objective with ratio-preserving replay batches and task-wise distillation,
//! the usual baselines (fine-tuning, global and task-wise distillation), the
//! ablations in between, and two post-hoc bias corrections.
//!
//! Everything is `f64` and seeded so that runs are bit-for-bit reproducible.
//! Classes are 0-based; task *numbers* `t` are 1-based (`1..=T`) while task
//! *indices* returned by [`layout::TaskLayout::task_of`] are 0-based.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layout;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
