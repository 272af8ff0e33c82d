//! Explainable anomaly detection for reaction-wheel telemetry.
//!
//! A convolutional autoencoder scores 16×16 telemetry chunks. For flagged
//! chunks, the activation entering its latent dense layer is projected onto
//! the top right singular vectors of that layer (a *core vector*), softly
//! assigned to Gaussian-mixture clusters, and mapped through an empirical
//! tag-given-cluster matrix into a *peephole*: a probability vector over
//! human-level tags such as anomaly type or faulty wheel.

pub mod anomaly;
pub mod autoencoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod peephole;
pub mod telemetry;
mod util;

pub use error::{Error, Result};
pub use util::{derive_seed, sha256_hex};

pub use anomaly::{AnomalyKind, AnomalyTag, IntensityCalibration, Scenario};
pub use autoencoder::{ArchitectureDescriptor, AutoencoderModel, TrainConfig};
pub use peephole::{GmmModel, NormStats, PeepholePipeline, PeepholeReport, PosteriorMatrix, ReducedMap, TagSet};
pub use telemetry::{Dataset, Split, Stream, TelemetryChunk};
