// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plot;
pub mod preprocess;
pub mod scalar;
pub mod scm;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{CgnError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type CgnF32 = model::Cgn<f32>;
pub type CgnF64 = model::Cgn<f64>;
pub type TrainerF32 = trainer::Trainer<f32>;
pub type TrainerF64 = trainer::Trainer<f64>;
pub type PairSetF32 = trainer::PairSet<f32>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub use scm::ExactProbability;
