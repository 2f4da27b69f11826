//! Dense-MLP training toolkit built around the retrospective loss.
//!
//! The retrospective term adds
//! `(κ+1)·‖g_θ(x) − y‖ − κ·‖g_θ(x) − g_θp(x)‖` to the task loss, where
//! `θp` is a frozen snapshot of the parameters from an earlier step.
//! This crate provides the pieces to train small models with and without
//! it under identical initialization and data order:
//!
//! - [`tensor`]: dense tensors, an explicit reverse-mode tape and a
//!   central-difference gradient checker.
//! - [`nn`]: MLP model, parameter snapshots and their binary format.
//! - [`retro`]: the loss itself, the guidance refresh schedule and scalar
//!   analysis oracles.
//! - [`optim`]: SGD, heavy-ball momentum and Adam.
//! - [`data`]: IDX loading, Gaussian blobs and seeded batching.
//! - [`harness`]: paired runs, sweeps, analysis reports and metric files.
//!
//! Numerical code is generic over [`Scalar`]; the `*F64`/`*F32` aliases
//! below name the concrete instantiations.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod retro;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TapeF64 = tensor::Tape<f64>;
pub type TapeF32 = tensor::Tape<f32>;
pub type GradMapF64 = tensor::GradMap<f64>;
pub type MlpModelF64 = nn::MlpModel<f64>;
pub type MlpModelF32 = nn::MlpModel<f32>;
pub type ParamSnapshotF64 = nn::ParamSnapshot<f64>;
pub type OptimizerF64 = optim::Optimizer<f64>;
pub type DatasetF64 = data::Dataset<f64>;
pub type DatasetF32 = data::Dataset<f32>;
