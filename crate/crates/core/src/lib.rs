//! EEG-to-gaze regression on the desk: a small deterministic tensor library with
//! reverse-mode autodiff, the CNN + vision-transformer layer stack built on it,
//! dataset plumbing with participant-wise splits and a planted-signal synthetic
//! generator, the Adam training loop, and RMSE/MED evaluation with a metric
//! auditor.
//!
//! Everything runs on CPU in `f32` by default; instantiate the same types with
//! `f64` for gradient checking. All randomness flows through [`tensor::RngStream`],
//! so identical seeds give bit-identical results regardless of thread count.

pub mod data;
pub mod eval;
pub(crate) mod fsutil;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use tensor::{RngStream, Tensor, TensorError};
