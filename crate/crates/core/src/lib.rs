//! Compact sound-event classifiers for microcontrollers: log-mel features,
//! knowledge distillation, post-training fixed-point quantization, int8
//! inference, and analytical cost/feasibility modeling.

pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod exec;
pub mod fxp;
pub mod mel;
pub mod model;
pub mod qexec;
pub mod quant;
pub mod scalar;
pub mod tensor;
pub mod tensorfile;

pub use error::{Error, Result};
pub use fxp::{QFormat, ShiftSpec};
pub use model::{Model, ModelArch, ModelWeights};
pub use scalar::Real;
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type TensorI8 = Tensor<i8>;
pub type ModelF32 = Model<f32>;
pub type ModelF64 = Model<f64>;
