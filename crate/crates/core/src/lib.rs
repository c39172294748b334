//! Two-stage rate-based training for spiking networks with
//! reliability-separated self-distillation.
//!
//! Stage one runs the spiking network forward over `T` timesteps without a
//! computational graph, accumulating eligibility traces and batch-norm
//! statistics. Stage two builds a single-step graph over firing rates,
//! attaches lightweight auxiliary classifiers, aggregates a teacher from the
//! heads that classify each sample correctly, and approximates spiking-layer
//! gradients from the traces.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix the
//! default `f64` precision.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod profiler;
pub mod scalar;
pub mod snn;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type BnState = autodiff::BnState<f64>;
pub type LifConfig = snn::LifConfig<f64>;
pub type SpikingNetwork = snn::SpikingNetwork<f64>;
pub type EligibilityTrace = snn::EligibilityTrace<f64>;
pub type Branch = distill::Branch<f64>;
pub type BranchOutputs = distill::BranchOutputs<f64>;
pub type TeacherLabel = distill::TeacherLabel<f64>;
pub type LossBreakdown = distill::LossBreakdown<f64>;
pub type Dataset = data::Dataset<f64>;
pub type EncodedBatch = data::EncodedBatch<f64>;
pub type Model = train::Model<f64>;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type SpikingNetwork32 = snn::SpikingNetwork<f32>;
pub type Model32 = train::Model<f32>;
