//! Self-paced multitask learning.
//!
//! Tasks are learned jointly through a shared structure (a mean vector, a
//! feature metric, or a low-dimensional subspace) while per-task weights τ
//! admit tasks from easy to hard as a threshold λ grows.

// NaN must fail the positivity checks, which `!(x > 0.0)` does
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod knowledge;
pub mod model;
pub mod pacing;
pub mod par;
pub mod seeds;
pub mod solvers;
pub mod trainer;

pub use error::{Error, Result};
