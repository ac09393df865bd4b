//! Denoising diffusion training and sampling with per-timestep loss weights
//! chosen from the signal-to-noise ratio of each step.

pub mod analytic;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod weighting;

pub use config::RunConfig;
pub use data::{DataPoint, DatasetDescriptor, DatasetKind};
pub use denoiser::{Activation, Architecture, Denoiser, DenoiserParams, DenoiserSpec};
pub use diffusion::{EpsModel, SamplerConfig, SamplerKind, VarianceMode};
pub use error::{Error, Result};
pub use schedule::{Schedule, ScheduleConfig, ScheduleFamily, Stage};
pub use trainer::{TrainConfig, Trainer};
pub use weighting::{WeightTable, WeightingConfig, WeightingScheme};
