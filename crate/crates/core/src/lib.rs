//! Spiking neural network training engine built around the change-perceptive
//! dendrite-soma-axon (CP-DSA) neuron.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense row-major `f64` arrays, matmul and conv2d.
//! * [`neurons`]: single-step dynamics for LIF, DSA and CP-DSA neurons.
//! * [`backprop`]: the hand-written reverse pass and a finite-difference
//!   gradient checker.
//! * [`network`]: layers, models, the recorded forward tape and the loss.
//! * [`data`]: event streams, frame integration, dataset splitting and
//!   synthetic temporal tasks.
//! * [`training`]: SGD with step/multistep schedules, range clamping,
//!   parameter tracing and the ablation harness.
//!
//! Data-parallel inner loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. All
//! reductions are performed in a fixed chunk order so both paths produce
//! bit-identical results.

pub mod backprop;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod network;
pub mod neurons;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
