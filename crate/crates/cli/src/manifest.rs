//! `run_manifest.toml`: the seeds, config hash and artifact hashes of a run.
//!
//! Each stage records the hashes of the files it read and wrote. Before a
//! stage reads a file that an earlier stage produced, the recorded hash is
//! checked against the file on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use peepscope_core::{sha256_hex, Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run_manifest.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    /// Relative path to SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path to SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
    /// Sizes and other integers worth keeping next to the hashes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Manifest {
            config_hash,
            seed,
            stages: BTreeMap::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {}", path.display(), e.message())))
    }

    /// Loads the manifest of `dir` and checks it was written under `config_hash`.
    pub fn open(dir: &Path, config_hash: &str) -> Result<Self> {
        let m = Self::load(dir)?;
        if m.config_hash != config_hash {
            return Err(Error::Mismatch(format!(
                "{} was produced under config {}, current config is {config_hash}; rerun `generate`",
                dir.display(),
                m.config_hash
            )));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = Self::path(dir);
        let text = toml::to_string(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// The stage that wrote `rel` and the hash it recorded.
    pub fn producer(&self, rel: &str) -> Option<(&str, &str)> {
        self.stages
            .iter()
            .find_map(|(stage, r)| r.outputs.get(rel).map(|h| (stage.as_str(), h.as_str())))
    }

    /// Hashes `rel` inside `dir`, refusing it if a recorded hash disagrees.
    pub fn verify_input(&self, dir: &Path, rel: &str) -> Result<String> {
        let path = dir.join(rel);
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing artifact")));
        }
        let hash = file_hash(&path)?;
        match self.producer(rel) {
            Some((stage, recorded)) if recorded != hash => Err(Error::Mismatch(format!(
                "{rel} does not match the hash recorded by `{stage}`; it was modified or comes from another run"
            ))),
            Some(_) => Ok(hash),
            None => Err(Error::Mismatch(format!("{rel} was not produced by any recorded stage"))),
        }
    }

    /// Replaces the record of `stage`, dropping any other stage's claim on the same outputs.
    pub fn record(&mut self, stage: &str, record: StageRecord) {
        for r in self.stages.values_mut() {
            r.outputs.retain(|k, _| !record.outputs.contains_key(k));
        }
        self.stages.insert(stage.to_string(), record);
    }
}

/// Collects the inputs and outputs of one stage as it runs.
pub struct StageLog<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
    record: StageRecord,
}

impl<'a> StageLog<'a> {
    pub fn new(dir: &'a Path, manifest: &'a Manifest, seed: u64) -> Self {
        StageLog {
            dir,
            manifest,
            record: StageRecord {
                seed,
                ..StageRecord::default()
            },
        }
    }

    /// Verifies an input against the chain and returns its full path.
    pub fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let hash = self.manifest.verify_input(self.dir, rel)?;
        self.record.inputs.insert(rel.to_string(), hash);
        Ok(self.dir.join(rel))
    }

    /// Records a file outside the chain, such as a user-supplied stream.
    pub fn external_input(&mut self, path: &Path) -> Result<()> {
        let hash = file_hash(path)?;
        self.record.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Records a file already written under the run directory.
    pub fn output(&mut self, rel: &str) -> Result<()> {
        let hash = file_hash(&self.dir.join(rel))?;
        self.record.outputs.insert(rel.to_string(), hash);
        Ok(())
    }

    pub fn count(&mut self, key: impl Into<String>, value: usize) {
        self.record.counts.insert(key.into(), value as u64);
    }

    pub fn finish(self) -> StageRecord {
        self.record
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "1\n").unwrap();
        let mut m = Manifest::new("h".into(), 1);
        let mut log = StageLog::new(dir.path(), &m, 5);
        log.output("a.csv").unwrap();
        let rec = log.finish();
        m.record("generate", rec);
        m.save(dir.path()).unwrap();

        let m = Manifest::open(dir.path(), "h").unwrap();
        assert!(m.verify_input(dir.path(), "a.csv").is_ok());
        std::fs::write(dir.path().join("a.csv"), "2\n").unwrap();
        assert!(matches!(m.verify_input(dir.path(), "a.csv"), Err(Error::Mismatch(_))));
        assert!(matches!(m.verify_input(dir.path(), "b.csv"), Err(Error::Io { .. })));
        assert!(matches!(Manifest::open(dir.path(), "other"), Err(Error::Mismatch(_))));
    }

    #[test]
    fn rerun_takes_over_outputs() {
        let mut m = Manifest::new("h".into(), 1);
        let rec = |f: &str| StageRecord {
            outputs: [(f.to_string(), "x".to_string())].into(),
            ..StageRecord::default()
        };
        m.record("a", rec("f"));
        m.record("b", rec("f"));
        assert_eq!(m.producer("f").unwrap().0, "b");
        assert!(m.stages["a"].outputs.is_empty());
    }
}
