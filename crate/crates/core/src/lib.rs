pub mod action;
pub mod config;
pub mod decoder;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod neural;
pub mod planner;
pub mod scalar;
pub mod synthworld;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use config::EngineConfig;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type WorldDecoderF32 = decoder::WorldDecoder<f32>;
pub type WorldDecoderF64 = decoder::WorldDecoder<f64>;
pub type MemoryQueueF32 = decoder::MemoryQueue<f32>;
pub type MemoryQueueF64 = decoder::MemoryQueue<f64>;
pub type PlannerNetF32 = planner::PlannerNet<f32>;
pub type PlannerNetF64 = planner::PlannerNet<f64>;
pub type NeuralWorldF32 = world::NeuralWorld<f32>;
pub type NeuralWorldF64 = world::NeuralWorld<f64>;
