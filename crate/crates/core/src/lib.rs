//! Attention-based centralized critics for cooperative multi-agent
//! reinforcement learning with agents that spawn and terminate mid-episode.

pub mod attention;
pub mod config;
pub mod critic;
pub mod envs;
pub mod meanlab;
pub mod nets;
pub mod policy;
pub mod scalar;
pub mod spaces;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use scalar::Real;

/// Double-precision matrix.
pub type Matrix = tensor::Matrix<f64>;
/// Double-precision computation graph.
pub type Graph = tensor::Graph<f64>;
/// Double-precision parameter store.
pub type ParamStore = tensor::ParamStore<f64>;
