//! Stepwise spatial global-local aggregation (SSGA) for online video object
//! detection, together with the synthetic data generator, training loop and
//! evaluation utilities used to exercise it.

pub mod aggregation;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod refinement;
pub mod roi;
pub mod runtime;
pub mod strategy;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;

pub use config::{ConfigFile, DataConfig, SsgaConfig, StopThreshold, TrainConfig};
pub use error::{Result, SsgaError};
pub use tensor::Tensor;
pub use types::{Detection, FeatureMap, FrameId, FrameTensor, GroundTruth, GtObject, RefinedEmbedding};
