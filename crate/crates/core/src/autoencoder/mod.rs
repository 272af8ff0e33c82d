//! Convolutional autoencoder detector: architecture, scoring, thresholding,
//! training and persistence.
//!
//! Parameters are stored and trained in `f32`; scoring and activation taps use
//! an exact `f64` copy of the same parameters.

mod gradcheck;
mod io;
pub(crate) mod layers;
mod network;
mod train;

pub use gradcheck::{gradient_check, Differentiable, GradientCheck, LinearProbe};
pub use io::{load_model, model_hash, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use layers::{Layer, LayerKind};
pub use network::{ForwardBatch, Network};
pub use train::{train, EpochLoss, TrainConfig};

use std::fmt::Debug;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::telemetry::{Dataset, TelemetryChunk, N_CHANNELS, WINDOW};

/// Floating-point types the network kernels run on.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::iter::Sum
    + Send
    + Sync
    + Debug
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Chunks scored per GEMM batch during inference.
pub const INFERENCE_BATCH: usize = 64;

/// Conv blocks use 3×3 kernels, stride 1, same padding and a leaky rectifier;
/// the decoder mirrors them with transposed convolutions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub filters: Vec<usize>,
    pub latent_dim: usize,
}

impl ArchitectureDescriptor {
    /// Two conv blocks of 38 and 76 filters and a 256-wide latent layer.
    pub fn reference() -> Self {
        ArchitectureDescriptor {
            filters: vec![38, 76],
            latent_dim: 256,
        }
    }

    /// Reduced profile for quick runs.
    pub fn small() -> Self {
        ArchitectureDescriptor {
            filters: vec![8, 16],
            latent_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) || self.latent_dim == 0 {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    /// Width of the flattened activation entering the latent layer.
    pub fn flatten_dim(&self) -> usize {
        self.filters.last().copied().unwrap_or(1) * WINDOW * N_CHANNELS
    }
}

/// Per-channel z-score statistics from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity() -> Self {
        Standardization {
            mean: vec![0.0; N_CHANNELS],
            std: vec![1.0; N_CHANNELS],
        }
    }

    /// Channels with (near) zero spread get unit scale.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Input("cannot standardize from an empty split".into()));
        }
        let n = (train.len() * WINDOW) as f64;
        let mut mean = vec![0.0; N_CHANNELS];
        for c in train.chunks() {
            for row in c.values().rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; N_CHANNELS];
        for c in train.chunks() {
            for row in c.values().rows() {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, values: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = values.to_owned();
        for (c, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
}

/// One chunk's pass through the detector, in standardized units.
#[derive(Clone, Debug)]
pub struct Forward {
    pub input: Array2<f64>,
    pub reconstruction: Array2<f64>,
    /// Latent vector `z` (identity activation, so also the dense pre-activation).
    pub latent: Array1<f64>,
    /// Flattened activation `x` entering the latent dense layer.
    pub latent_input: Array1<f64>,
    pub score: f64,
}

/// Scores and activations of one inference batch.
pub struct BatchOutput {
    pub scores: Vec<f64>,
    pub forward: ForwardBatch<f64>,
}

#[derive(Clone, Debug)]
pub struct AutoencoderModel {
    pub architecture: ArchitectureDescriptor,
    pub network: Network<f32>,
    pub standardization: Standardization,
    /// Score threshold `τ`; `-inf` flags everything.
    pub threshold: Option<f64>,
    pub meta: TrainingMeta,
    inference: OnceLock<Network<f64>>,
}

impl PartialEq for AutoencoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.architecture == other.architecture
            && self.network == other.network
            && self.standardization == other.standardization
            && self.threshold.map(f64::to_bits) == other.threshold.map(f64::to_bits)
            && self.meta == other.meta
    }
}

/// Mean squared difference over the 256 entries.
pub fn reconstruction_score(x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) -> f64 {
    x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

impl AutoencoderModel {
    pub fn new(architecture: ArchitectureDescriptor, standardization: Standardization, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let network = Network::init(&architecture, seed);
        Ok(Self::from_parts(
            architecture,
            network,
            standardization,
            None,
            TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        ))
    }

    pub fn from_parts(
        architecture: ArchitectureDescriptor,
        network: Network<f32>,
        standardization: Standardization,
        threshold: Option<f64>,
        meta: TrainingMeta,
    ) -> Self {
        AutoencoderModel {
            architecture,
            network,
            standardization,
            threshold,
            meta,
            inference: OnceLock::new(),
        }
    }

    /// Replaces the parameters, invalidating the cached `f64` copy.
    pub fn set_network(&mut self, network: Network<f32>) {
        self.network = network;
        self.inference = OnceLock::new();
    }

    pub fn inference_network(&self) -> &Network<f64> {
        self.inference.get_or_init(|| self.network.cast())
    }

    /// Standardized chunks as rows of a `[B, 256]` matrix.
    pub fn prepare(&self, chunks: &[TelemetryChunk]) -> Array2<f64> {
        let mut input = Array2::zeros((chunks.len(), WINDOW * N_CHANNELS));
        for (mut row, c) in input.rows_mut().into_iter().zip(chunks) {
            let z = self.standardization.apply(c.values());
            row.assign(&ndarray::ArrayView1::from(z.as_slice().unwrap()));
        }
        input
    }

    pub fn forward_values(&self, values: ArrayView2<'_, f64>) -> Result<Forward> {
        if values.dim() != (WINDOW, N_CHANNELS) {
            return Err(Error::Input(format!("expected a 16x16 chunk, got {:?}", values.dim())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("chunk contains non-finite values".into()));
        }
        let z = self.standardization.apply(values);
        let input = z.to_shape((1, WINDOW * N_CHANNELS)).unwrap().to_owned();
        let out = self.inference_network().forward_batch(input.view());
        let reconstruction = out.reconstruction.to_shape((WINDOW, N_CHANNELS)).unwrap().to_owned();
        let score = reconstruction_score(z.view(), reconstruction.view());
        Ok(Forward {
            input: z,
            reconstruction,
            latent: out.latent.row(0).to_owned(),
            latent_input: out.latent_input.row(0).to_owned(),
            score,
        })
    }

    pub fn forward(&self, chunk: &TelemetryChunk) -> Result<Forward> {
        self.forward_values(chunk.values())
    }

    pub fn score(&self, chunk: &TelemetryChunk) -> Result<f64> {
        Ok(self.forward(chunk)?.score)
    }

    /// Runs fixed batches of [`INFERENCE_BATCH`] chunks (in parallel on the
    /// current rayon pool) and maps each batch through `f`, preserving order.
    pub fn map_batches<R, F>(&self, chunks: &[TelemetryChunk], f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&[TelemetryChunk], BatchOutput) -> Vec<R> + Sync,
    {
        let net = self.inference_network();
        chunks
            .par_chunks(INFERENCE_BATCH)
            .map(|batch| {
                let input = self.prepare(batch);
                let forward = net.forward_batch(input.view());
                let scores = input
                    .rows()
                    .into_iter()
                    .zip(forward.reconstruction.rows())
                    .map(|(x, r)| x.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
                    .collect();
                f(batch, BatchOutput { scores, forward })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn score_batch(&self, chunks: &[TelemetryChunk]) -> Vec<f64> {
        self.map_batches(chunks, |_, out| out.scores)
    }

    /// `score > τ`. Unset thresholds flag nothing.
    pub fn flag(&self, score: f64) -> bool {
        self.threshold.is_some_and(|t| score > t)
    }

    /// `(W, b)` of the latent dense layer in `f64`.
    pub fn latent_layer(&self) -> (Array2<f64>, Array1<f64>) {
        let (w, b) = self.inference_network().latent_layer();
        (w.clone(), b.clone())
    }

    pub fn calibrate_threshold(&mut self, val_nominal: &Dataset, target_fpr: f64) -> Result<f64> {
        if !val_nominal.is_nominal() {
            return Err(Error::Input("threshold selection needs nominal validation data".into()));
        }
        let scores = self.score_batch(val_nominal.chunks());
        let tau = choose_threshold(&scores, target_fpr)?;
        self.threshold = Some(tau);
        Ok(tau)
    }
}

/// Smallest `τ` with at most `⌊target_fpr · n⌋` scores strictly above it.
pub fn choose_threshold(scores: &[f64], target_fpr: f64) -> Result<f64> {
    if !(target_fpr > 0.0 && target_fpr <= 1.0) {
        return Err(Error::Param(format!("target FPR {target_fpr} outside (0, 1]")));
    }
    let n = scores.len();
    if (n as f64) * target_fpr < 1.0 - 1e-9 {
        return Err(Error::Input(format!(
            "{n} nominal validation chunks cannot resolve FPR {target_fpr}; use a validation split of at least {} chunks",
            (1.0 / target_fpr).ceil()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score during threshold selection".into()));
    }
    let allowed = (target_fpr * n as f64 + 1e-9).floor() as usize;
    if allowed >= n {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[n - 1 - allowed])
}
