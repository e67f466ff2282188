//! Minimal reverse-mode differentiation over 2-D `f64` tensors, with the
//! neural primitives, AdamW, and learning-rate schedules the encoders and the
//! fusion layer need.

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{grad_check, relative_error, GradCheck, REL_FLOOR};
pub use graph::{Axis, Graph, NodeId};
pub use optim::{AdamW, Schedule, ONE_CYCLE_WARMUP};
pub use params::{NamedTensor, ParamId, ParamStore, Parameter};

use rand::Rng;

use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Uniform fan-in initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("init shape")
}
