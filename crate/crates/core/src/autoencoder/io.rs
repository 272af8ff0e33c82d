//! Model file: magic `PEEP`, `u32` version, `u64` manifest length, JSON
//! manifest, then little-endian `f32` tensors in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureDescriptor, AutoencoderModel, Layer, LayerKind, Network, Standardization, TrainingMeta};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub const MODEL_MAGIC: [u8; 4] = *b"PEEP";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    architecture: ArchitectureDescriptor,
    standardization: Standardization,
    /// `{:?}` rendering so `-inf` survives.
    threshold: Option<String>,
    training: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_model(model: &AutoencoderModel) -> Vec<u8> {
    let mut tensors = Vec::new();
    for (i, l) in model.network.layers.iter().enumerate() {
        tensors.push(TensorEntry {
            name: format!("layer{i}.weight"),
            shape: l.weight.shape().to_vec(),
        });
        tensors.push(TensorEntry {
            name: format!("layer{i}.bias"),
            shape: l.bias.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        architecture: model.architecture.clone(),
        standardization: model.standardization.clone(),
        threshold: model.threshold.map(|t| format!("{t:?}")),
        training: model.meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.network.n_params());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for slice in model.network.param_slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("model file truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode_model(mut bytes: &[u8]) -> Result<AutoencoderModel> {
    let magic = take(&mut bytes, 4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}: expected `PEEP`",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version} (this build reads version {MODEL_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "manifest length")?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(take(&mut bytes, len, "manifest")?)
        .map_err(|e| Error::Format(format!("bad model manifest: {e}")))?;
    manifest.architecture.validate()?;
    let mut network = Network::<f32>::zeros(&manifest.architecture);
    let expected: Vec<Vec<usize>> = network
        .layers
        .iter()
        .flat_map(|l: &Layer<f32>| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
        .collect();
    let declared: Vec<Vec<usize>> = manifest.tensors.iter().map(|t| t.shape.clone()).collect();
    if declared != expected {
        return Err(Error::Format("tensor shapes do not match the declared architecture".into()));
    }
    for (slice, entry) in network.param_slices_mut().into_iter().zip(&manifest.tensors) {
        let raw = take(&mut bytes, 4 * slice.len(), &entry.name)?;
        for (v, b) in slice.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", bytes.len())));
    }
    if !network.all_finite() {
        return Err(Error::Format("model parameters are not all finite".into()));
    }
    debug_assert!(network.layers[network.latent].kind == LayerKind::Dense);
    let threshold = manifest
        .threshold
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad threshold `{t}`"))))
        .transpose()?;
    Ok(AutoencoderModel::from_parts(
        manifest.architecture,
        network,
        manifest.standardization,
        threshold,
        manifest.training,
    ))
}

pub fn save_model(model: &AutoencoderModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AutoencoderModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// SHA-256 of the encoded model.
pub fn model_hash(model: &AutoencoderModel) -> String {
    sha256_hex(&encode_model(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{chunk_stream, generate_stream, Dataset, GeneratorConfig, Split};

    fn model() -> (AutoencoderModel, Dataset) {
        let s = generate_stream(&GeneratorConfig::with_defaults(1, 64)).unwrap();
        let ds = Dataset::nominal(chunk_stream(&s, 16).unwrap(), Split::Train);
        let mut m =
            AutoencoderModel::new(ArchitectureDescriptor::small(), Standardization::fit(&ds).unwrap(), 8).unwrap();
        m.threshold = Some(0.125);
        (m, ds)
    }

    #[test]
    fn round_trip_scores_identically() {
        let (m, ds) = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.peep");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        for c in ds.chunks() {
            assert_eq!(back.score(c).unwrap().to_bits(), m.score(c).unwrap().to_bits());
        }
    }

    #[test]
    fn negative_infinity_threshold_survives() {
        let (mut m, _) = model();
        m.threshold = Some(f64::NEG_INFINITY);
        assert_eq!(decode_model(&encode_model(&m)).unwrap().threshold, Some(f64::NEG_INFINITY));
    }

    #[test]
    fn format_errors() {
        let (m, _) = model();
        let bytes = encode_model(&m);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        let e = decode_model(&bad).unwrap_err();
        assert!(e.to_string().contains("PEEP"), "{e}");

        let mut v99 = bytes.clone();
        v99[4..8].copy_from_slice(&99u32.to_le_bytes());
        let e = decode_model(&v99).unwrap_err();
        assert!(e.to_string().contains("unsupported model version 99"), "{e}");

        let e = decode_model(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
    }
}
