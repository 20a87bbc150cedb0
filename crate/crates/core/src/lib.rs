//! A small from-scratch neural-network library built around a parameter-free
//! spatial attention layer for GAP-based classifiers, with hand-derived
//! backward passes throughout, class-activation-map export, a synthetic
//! cross-camera re-identification benchmark, and CMC/mAP retrieval
//! evaluation.

pub mod attention;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod tape;
pub mod tensor;

pub use attention::{AttentionMap, GapMode};
pub use cam::{Cam, CamProvenance, HeatmapFormat};
pub use dataset::{Sample, Split, ToySpec};
pub use error::{Error, Result};
pub use model::{ModelConfig, Params, StageConfig};
pub use retrieval::RankingResult;
pub use tape::LayerTape;
pub use tensor::Tensor;
