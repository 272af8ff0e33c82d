//! The single TOML file that drives every stage of a run.

use std::path::{Path, PathBuf};

use peepscope_core::anomaly::AnomalyKind;
use peepscope_core::autoencoder::ArchitectureDescriptor;
use peepscope_core::telemetry::{ChannelParams, GeneratorConfig, WINDOW};
use peepscope_core::{sha256_hex, Error, Result, TagSet, TrainConfig};
use serde::{Deserialize, Serialize};

const SECTIONS: [&str; 6] = ["generator", "dataset", "anomaly", "train", "peephole", "eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for batched inference. 1 keeps runs bit-exact across machines.
    #[serde(default = "one")]
    pub threads: usize,
    pub generator: GeneratorSection,
    pub dataset: DatasetSection,
    pub anomaly: AnomalySection,
    pub train: TrainSection,
    pub peephole: PeepholeSection,
    pub eval: EvalSection,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub sample_rate: f64,
    pub burn_in: usize,
    /// Per-channel parameters; empty selects the built-in four-wheel profile.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<ChannelParams>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            sample_rate: 1.0,
            burn_in: 100,
            channels: Vec::new(),
        }
    }
}

impl GeneratorSection {
    pub fn generator(&self, seed: u64, n_samples: usize) -> GeneratorConfig {
        let channels = if self.channels.is_empty() {
            GeneratorConfig::default_channels()
        } else {
            self.channels.clone()
        };
        GeneratorConfig {
            seed,
            channels,
            sample_rate: self.sample_rate,
            n_samples,
            burn_in: self.burn_in,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_chunks: usize,
    pub val_chunks: usize,
    pub test_chunks: usize,
    /// Window stride in samples; 16 gives non-overlapping chunks.
    pub stride: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train_chunks: 50_000,
            val_chunks: 12_500,
            test_chunks: 7_000,
            stride: WINDOW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalySection {
    /// `gwn|offset|impulse|psa|step|all`, comma separated.
    pub kinds: String,
    /// Leading validation chunks to corrupt; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_chunks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_chunks: Option<usize>,
    /// Multiplies every calibrated intensity.
    pub intensity_scale: f64,
}

impl Default for AnomalySection {
    fn default() -> Self {
        AnomalySection {
            kinds: "all".into(),
            val_chunks: None,
            test_chunks: None,
            intensity_scale: 1.0,
        }
    }
}

impl AnomalySection {
    pub fn kinds(&self) -> Result<Vec<AnomalyKind>> {
        AnomalyKind::parse_list(&self.kinds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub filters: Vec<usize>,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Validation chunks scored each epoch; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_monitor: Option<usize>,
    /// False positive rate the threshold is calibrated to on nominal validation data.
    pub target_fpr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let arch = ArchitectureDescriptor::reference();
        let t = TrainConfig::default();
        TrainSection {
            filters: arch.filters,
            latent_dim: arch.latent_dim,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            val_monitor: None,
            target_fpr: 1e-3,
        }
    }
}

impl TrainSection {
    pub fn architecture(&self) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            filters: self.filters.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed,
            val_monitor: self.val_monitor,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeepholeSection {
    pub kappa: usize,
    pub components: usize,
    /// Tag set explained in scenario II; scenario I always explains kinds.
    pub tag_set: TagSet,
}

impl Default for PeepholeSection {
    fn default() -> Self {
        PeepholeSection {
            kappa: peepscope_core::peephole::DEFAULT_KAPPA,
            components: peepscope_core::peephole::DEFAULT_COMPONENTS,
            tag_set: TagSet::Wheels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Length of the synthetic stream `explain` builds when no stream is given.
    pub stream_samples: usize,
    pub event_start: usize,
    pub event_length: usize,
    pub stride: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            stream_samples: 2000,
            event_start: 1000,
            event_length: 8,
            stride: 1,
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for section in SECTIONS {
            if !table.contains_key(section) {
                return Err(Error::Config(format!("missing section [{section}]")));
            }
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.train_chunks == 0 || d.val_chunks == 0 || d.test_chunks == 0 {
            return Err(Error::Config("[dataset] chunk counts must be positive".into()));
        }
        if d.stride == 0 {
            return Err(Error::Config("[dataset] stride must be positive".into()));
        }
        self.generator.generator(0, 1).validate()?;
        self.anomaly.kinds()?;
        if !(self.anomaly.intensity_scale > 0.0) || !self.anomaly.intensity_scale.is_finite() {
            return Err(Error::Config("[anomaly] intensity_scale must be positive".into()));
        }
        self.train.architecture().validate()?;
        self.train.train_config(0).validate()?;
        if !(self.train.target_fpr > 0.0 && self.train.target_fpr < 1.0) {
            return Err(Error::Config("[train] target_fpr must lie in (0, 1)".into()));
        }
        if self.peephole.kappa == 0 || self.peephole.kappa > self.train.latent_dim {
            return Err(Error::Config(format!(
                "[peephole] kappa must lie in 1..={}",
                self.train.latent_dim
            )));
        }
        if self.peephole.components == 0 {
            return Err(Error::Config("[peephole] components must be positive".into()));
        }
        let e = &self.eval;
        if e.stride == 0 || e.stream_samples < WINDOW || e.event_start + e.event_length > e.stream_samples {
            return Err(Error::Config("[eval] event must fit inside a stream of at least one window".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of everything that influences results; the output location and
    /// thread count are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.threads = 1;
        sha256_hex(c.to_toml().as_bytes())
    }

    /// Total samples the generator emits for all three splits.
    pub fn stream_samples(&self) -> usize {
        let d = &self.dataset;
        (d.train_chunks + d.val_chunks + d.test_chunks - 1) * d.stride + WINDOW
    }
}
