//! Cloud-fog video analytics over a simulated network.
//!
//! The crate models a client-fog-cloud deployment where the fog node
//! re-encodes each chunk to a low quality, the cloud localizes objects in
//! it, and the fog classifies the uncertain regions from the original
//! high-quality frames. Video, detectors and feature extractors are
//! deterministic parametric stand-ins so whole experiments replay exactly
//! from a seed.

pub mod baselines;
pub mod config;
pub mod coordinator;
pub mod datamodel;
pub mod engine;
pub mod hitl;
pub mod metrics;
pub mod oracle;
pub mod quality;
pub mod runtime;
pub mod seed;

pub use config::ExperimentConfig;
pub use datamodel::{
    BBox, Detection, Frame, GroundTruthObject, LabelResult, LabelSource, QualityLevel, Scene,
    SimTime, VideoChunk,
};
pub use engine::{Engine, ExperimentOutput};
pub use metrics::MetricsReport;
