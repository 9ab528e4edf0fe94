//! Noise-injection training and robustness evaluation for neural networks
//! deployed on noisy analog hardware.
//!
//! The crate covers a small reverse-mode autodiff engine, LeNet-5 / MLP
//! model presets with additive Gaussian noise at activation outputs, fixed
//! and variance-aware noisy training, and the evaluation pipeline built on
//! accuracy-versus-noise curves: AUC, relative AUC against an upper-bound
//! curve, preserved accuracy and the (alpha, theta) grid scan.
//!
//! Numeric code is generic over [`Scalar`]; the aliases at the crate root
//! fix it to `f32`, the production storage type.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
mod kernels;
pub mod model;
pub mod noise;
pub mod scalar;
pub mod scan;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{predict_accuracy, InjectionConfig, Layer, LayerKind, Preset};
pub use noise::{
    mix_seed, normal_draw, sample_activation_noise, sample_sigma_var, NoiseContext, NoiseSchedule,
    RngStream, SigmaRectify, StreamPath,
};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type Model = model::ModelGraph<f32>;
pub type ModelF64 = model::ModelGraph<f64>;
pub use model::ModelGraph;
