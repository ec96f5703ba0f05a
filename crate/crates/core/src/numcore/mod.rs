// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic numerics shared by the probe and SAE trainers.
//!
//! Everything here accumulates in `f64` and performs reductions in a fixed
//! order, so results are bit-identical across runs and thread schedules.

mod adam;
mod linalg;
mod logistic;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use linalg::{argsort_desc, dot, dot_f32, mean, sigmoid};
pub use logistic::{logistic_forward_backward, LogisticGrad};
pub use rng::Rng;
