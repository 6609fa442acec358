//! Noise-robust time-series classification.
//!
//! The pipeline: a convolutional + self-attention encoder is warmed up on all
//! observed labels, then every epoch the per-class training-loss distribution
//! is fitted with a two-component mixture. Low-loss samples are trained on
//! directly (and augmented with time warping), samples between the two
//! component means get soft corrected targets, and high-loss samples only
//! contribute to the reconstruction objective.

pub mod augment;
pub mod data;
pub mod eval;
pub mod model;
pub mod noise;
pub mod rng;
pub mod select;
pub mod train;

pub use data::{DatasetMeta, TimeSeriesDataset};
pub use eval::{RunReport, weighted_f1};
pub use noise::{FlipMask, NoiseKind, NoiseSpec};
pub use select::{MixtureFit, SamplePartition, Selector};
pub use train::{EncoderVariant, TrainConfig};
