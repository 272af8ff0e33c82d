//! Telemetry data model: 16×16 chunks, datasets and their splits, a seeded
//! synthetic stream generator and CSV persistence.

mod csv_io;
mod generator;

pub use csv_io::{read_labeled_csv, read_stream_csv, write_labeled_csv, write_stream_csv};
pub use generator::{generate_stream, ChannelParams, GeneratorConfig, Sinusoid};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::anomaly::{AnomalyKind, AnomalyTag};
use crate::error::{Error, Result};

/// Time samples per chunk.
pub const WINDOW: usize = 16;
/// Telemetry channels per sample.
pub const N_CHANNELS: usize = 16;
/// Reaction wheels on the spacecraft.
pub const N_WHEELS: usize = 4;
/// Channels recorded per wheel.
pub const CHANNELS_PER_WHEEL: usize = 4;

/// Assignment of channel index to `(wheel, signal kind)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelMap([(u8, u8); N_CHANNELS]);

impl ChannelMap {
    /// The fixed layout used throughout: channels `4k..4k+3` belong to wheel `k`.
    pub const fn standard() -> Self {
        let mut map = [(0u8, 0u8); N_CHANNELS];
        let mut ch = 0;
        while ch < N_CHANNELS {
            map[ch] = ((ch / CHANNELS_PER_WHEEL) as u8, (ch % CHANNELS_PER_WHEEL) as u8);
            ch += 1;
        }
        ChannelMap(map)
    }

    pub fn wheel_of(&self, channel: usize) -> usize {
        self.0[channel].0 as usize
    }

    pub fn signal_of(&self, channel: usize) -> usize {
        self.0[channel].1 as usize
    }

    pub fn channels_of_wheel(wheel: usize) -> std::ops::Range<usize> {
        wheel * CHANNELS_PER_WHEEL..(wheel + 1) * CHANNELS_PER_WHEEL
    }

    /// Checks the bijection onto `{0..15}` and the wheel grouping.
    pub fn is_valid(&self) -> bool {
        let mut seen = [false; N_CHANNELS];
        for (ch, &(wheel, signal)) in self.0.iter().enumerate() {
            let (wheel, signal) = (wheel as usize, signal as usize);
            if wheel >= N_WHEELS || signal >= CHANNELS_PER_WHEEL || wheel != ch / CHANNELS_PER_WHEEL {
                return false;
            }
            let slot = wheel * CHANNELS_PER_WHEEL + signal;
            if seen[slot] {
                return false;
            }
            seen[slot] = true;
        }
        true
    }
}

impl Default for ChannelMap {
    fn default() -> Self {
        Self::standard()
    }
}

/// One detector input: 16 time samples (rows) × 16 channels (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct TelemetryChunk {
    values: Array2<f64>,
    channel_map: ChannelMap,
    origin: u64,
}

impl TelemetryChunk {
    pub fn new(values: Array2<f64>, origin: u64) -> Result<Self> {
        if values.dim() != (WINDOW, N_CHANNELS) {
            return Err(Error::Input(format!(
                "chunk must be {WINDOW}x{N_CHANNELS}, got {:?}",
                values.dim()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("chunk at origin {origin} holds non-finite value {v}")));
        }
        Ok(TelemetryChunk {
            values,
            channel_map: ChannelMap::standard(),
            origin,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn column(&self, channel: usize) -> ArrayView1<'_, f64> {
        self.values.column(channel)
    }

    pub fn channel_map(&self) -> &ChannelMap {
        &self.channel_map
    }

    /// Index of the first sample of this chunk in its source stream.
    pub fn origin(&self) -> u64 {
        self.origin
    }
}

/// A contiguous multichannel series: `samples` is `len × 16`, row `r` is sample `start_index + r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub start_index: u64,
    pub samples: Array2<f64>,
}

impl Stream {
    pub fn new(start_index: u64, samples: Array2<f64>) -> Result<Self> {
        if samples.ncols() != N_CHANNELS {
            return Err(Error::Input(format!(
                "stream must have {N_CHANNELS} channels, got {}",
                samples.ncols()
            )));
        }
        Ok(Stream {
            start_index,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

/// An ordered set of chunks drawn from one split, optionally tagged.
#[derive(Clone, Debug)]
pub struct Dataset {
    chunks: Vec<TelemetryChunk>,
    split: Split,
    labels: Option<Vec<AnomalyTag>>,
}

impl Dataset {
    pub fn new(chunks: Vec<TelemetryChunk>, split: Split, labels: Option<Vec<AnomalyTag>>) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != chunks.len() {
                return Err(Error::Input(format!(
                    "{} labels for {} chunks",
                    labels.len(),
                    chunks.len()
                )));
            }
            if split == Split::Train && labels.iter().any(|t| t.kind != AnomalyKind::Nominal) {
                return Err(Error::Input("train split must contain only nominal chunks".into()));
            }
        }
        Ok(Dataset { chunks, split, labels })
    }

    pub fn nominal(chunks: Vec<TelemetryChunk>, split: Split) -> Self {
        Dataset {
            chunks,
            split,
            labels: None,
        }
    }

    pub fn chunks(&self) -> &[TelemetryChunk] {
        &self.chunks
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> Option<&[AnomalyTag]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// True when every chunk is unlabeled or labeled nominal.
    pub fn is_nominal(&self) -> bool {
        self.labels
            .as_ref()
            .map_or(true, |l| l.iter().all(|t| t.kind == AnomalyKind::Nominal))
    }

    /// Keeps the first `n` chunks (and their labels).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            chunks: self.chunks[..n].to_vec(),
            split: self.split,
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// Rebuilds the contiguous stream underlying a stride-16 dataset.
    pub fn to_stream(&self) -> Result<Stream> {
        let start = self.chunks.first().map_or(0, |c| c.origin());
        for (i, c) in self.chunks.iter().enumerate() {
            if c.origin() != start + (i * WINDOW) as u64 {
                return Err(Error::Input(format!(
                    "chunk {i} at origin {} is not contiguous with its predecessor",
                    c.origin()
                )));
            }
        }
        let views: Vec<_> = self.chunks.iter().map(|c| c.values()).collect();
        let samples = if views.is_empty() {
            Array2::zeros((0, N_CHANNELS))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("chunks share column count")
        };
        Stream::new(start, samples)
    }
}

/// Slides a 16-sample window over `stream` with the given stride.
pub fn chunk_stream(stream: &Stream, stride: usize) -> Result<Vec<TelemetryChunk>> {
    if stride == 0 {
        return Err(Error::Param("stride must be positive".into()));
    }
    let len = stream.len();
    if len < WINDOW {
        return Err(Error::Input(format!(
            "stream of {len} samples is shorter than the {WINDOW}-sample window; no chunks produced"
        )));
    }
    let count = (len - WINDOW) / stride + 1;
    (0..count)
        .map(|t| {
            let start = t * stride;
            let values = stream.samples.slice(ndarray::s![start..start + WINDOW, ..]).to_owned();
            TelemetryChunk::new(values, stream.start_index + start as u64)
        })
        .collect()
}

/// Splits chunks into contiguous train / validation / test sets, train earliest.
///
/// Train and validation sizes are `floor(f * n)`; test takes the remainder.
pub fn split_dataset(
    chunks: Vec<TelemetryChunk>,
    fractions: (f64, f64, f64),
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(*f > 0.0)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n = chunks.len();
    let n_train = (ft * n as f64 + 1e-9).floor() as usize;
    let n_val = (fv * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "{n} chunks cannot be split by {fractions:?} without an empty split"
        )));
    }
    let mut rest = chunks;
    let test = rest.split_off(n_train + n_val);
    let val = rest.split_off(n_train);
    Ok((
        Dataset::nominal(rest, Split::Train),
        Dataset::nominal(val, Split::Validation),
        Dataset::nominal(test, Split::Test),
    ))
}
