//! Single-step multimodal action generation trained with drifting fields,
//! plus a flow-matching baseline and toy benchmarks to compare them.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; the aliases below
//! fix the precision for the common cases.

pub mod bench;
pub mod config;
pub mod drift;
pub mod error;
pub mod flow;
pub mod fsutil;
pub mod gradcheck;
pub mod nets;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Generator64 = nets::Generator<f64>;
pub type Generator32 = nets::Generator<f32>;
pub type FlowNet64 = flow::FlowNet<f64>;
pub type FlowNet32 = flow::FlowNet<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;
