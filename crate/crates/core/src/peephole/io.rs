//! Pipeline artifact: magic `PPHL`, `u32` version, `u64` manifest length,
//! JSON manifest, then little-endian `f64` arrays in manifest order.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{GmmModel, NormStats, PeepholePipeline, PosteriorMatrix, ReducedMap, TagSet};
use crate::error::{Error, Result};

pub const PIPELINE_MAGIC: [u8; 4] = *b"PPHL";
pub const PIPELINE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    pipeline_id: String,
    model_hash: String,
    tag_set: TagSet,
    vocabulary: Vec<String>,
    kappa: usize,
    components: usize,
    seed: u64,
    n_fit: usize,
    norm_degenerate: Vec<usize>,
    gmm_log_likelihood: Vec<f64>,
    gmm_restart: usize,
    gmm_converged: bool,
    posterior_counts: Vec<Vec<u64>>,
    posterior_empty_columns: Vec<usize>,
    arrays: Vec<ArrayEntry>,
}

fn arrays(p: &PeepholePipeline) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
    let c = p.n_components();
    let k = p.kappa();
    let flat2 = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    let flat1 = |a: &Array1<f64>| a.to_vec();
    vec![
        ("map.q", p.map.q.shape().to_vec(), flat2(&p.map.q)),
        ("map.sigma", vec![k], flat1(&p.map.sigma)),
        ("map.p", p.map.p.shape().to_vec(), flat2(&p.map.p)),
        ("map.spectrum", vec![p.map.spectrum.len()], flat1(&p.map.spectrum)),
        ("norm.mean", vec![k], flat1(&p.norm.mean)),
        ("norm.std", vec![k], flat1(&p.norm.std)),
        ("gmm.weights", vec![c], flat1(&p.gmm.weights)),
        ("gmm.means", vec![c, k], flat2(&p.gmm.means)),
        (
            "gmm.covariances",
            vec![c, k, k],
            p.gmm.covariances.iter().flat_map(|m| m.iter().copied()).collect(),
        ),
        ("posterior.u", p.posterior.u.shape().to_vec(), flat2(&p.posterior.u)),
    ]
}

pub fn encode_pipeline(p: &PeepholePipeline) -> Vec<u8> {
    let data = arrays(p);
    let manifest = Manifest {
        pipeline_id: p.id.clone(),
        model_hash: p.model_hash.clone(),
        tag_set: p.tag_set,
        vocabulary: p.posterior.vocabulary.clone(),
        kappa: p.kappa(),
        components: p.n_components(),
        seed: p.seed,
        n_fit: p.n_fit,
        norm_degenerate: p.norm.degenerate.clone(),
        gmm_log_likelihood: p.gmm.log_likelihood.clone(),
        gmm_restart: p.gmm.restart,
        gmm_converged: p.gmm.converged,
        posterior_counts: p.posterior.counts.rows().into_iter().map(|r| r.to_vec()).collect(),
        posterior_empty_columns: p.posterior.empty_columns.clone(),
        arrays: data
            .iter()
            .map(|(name, shape, _)| ArrayEntry {
                name: name.to_string(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&PIPELINE_MAGIC);
    out.extend_from_slice(&PIPELINE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, values) in &data {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("pipeline artifact truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn decode_pipeline(mut bytes: &[u8]) -> Result<PeepholePipeline> {
    if take(&mut bytes, 4, "magic")? != PIPELINE_MAGIC {
        return Err(bad("bad magic: expected `PPHL`"));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != PIPELINE_VERSION {
        return Err(bad(format!(
            "unsupported pipeline version {version} (this build reads version {PIPELINE_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "manifest length")?.try_into().unwrap()) as usize;
    let m: Manifest = serde_json::from_slice(take(&mut bytes, len, "manifest")?)
        .map_err(|e| bad(format!("bad pipeline manifest: {e}")))?;

    let mut read = std::collections::HashMap::new();
    for entry in &m.arrays {
        let n: usize = entry.shape.iter().product();
        let raw = take(&mut bytes, 8 * n, &entry.name)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| bad(e.to_string()))?;
        read.insert(entry.name.clone(), array);
    }
    if !bytes.is_empty() {
        return Err(bad(format!("{} trailing bytes after arrays", bytes.len())));
    }
    let mut get = |name: &str| read.remove(name).ok_or_else(|| bad(format!("missing array `{name}`")));
    let two = |a: ArrayD<f64>| a.into_dimensionality::<ndarray::Ix2>().map_err(|e| bad(e.to_string()));
    let one = |a: ArrayD<f64>| a.into_dimensionality::<ndarray::Ix1>().map_err(|e| bad(e.to_string()));

    let map = ReducedMap {
        q: two(get("map.q")?)?,
        sigma: one(get("map.sigma")?)?,
        p: two(get("map.p")?)?,
        spectrum: one(get("map.spectrum")?)?,
        pipeline_id: m.pipeline_id.clone(),
    };
    let norm = NormStats {
        mean: one(get("norm.mean")?)?,
        std: one(get("norm.std")?)?,
        degenerate: m.norm_degenerate,
        pipeline_id: m.pipeline_id.clone(),
    };
    let weights = one(get("gmm.weights")?)?;
    let means = two(get("gmm.means")?)?;
    let covs = get("gmm.covariances")?;
    let (c, k) = (m.components, m.kappa);
    if covs.shape() != [c, k, k] || means.dim() != (c, k) || map.sigma.len() != k || norm.mean.len() != k {
        return Err(bad("array shapes disagree with κ and C"));
    }
    let covariances = covs
        .outer_iter()
        .map(|a| a.into_dimensionality::<ndarray::Ix2>().unwrap().to_owned())
        .collect();
    let mut gmm = GmmModel::from_parts(weights, means, covariances)?;
    gmm.log_likelihood = m.gmm_log_likelihood;
    gmm.seed = m.seed;
    gmm.restart = m.gmm_restart;
    gmm.converged = m.gmm_converged;
    gmm.pipeline_id = m.pipeline_id.clone();

    let u = two(get("posterior.u")?)?;
    let t = m.vocabulary.len();
    if u.dim() != (t, c) || m.posterior_counts.len() != t || m.posterior_counts.iter().any(|r| r.len() != c) {
        return Err(bad("posterior shape disagrees with the vocabulary"));
    }
    let counts = Array2::from_shape_fn((t, c), |(i, j)| m.posterior_counts[i][j]);
    let posterior = PosteriorMatrix {
        vocabulary: m.vocabulary,
        counts,
        u,
        empty_columns: m.posterior_empty_columns,
        pipeline_id: m.pipeline_id.clone(),
    };
    Ok(PeepholePipeline {
        id: m.pipeline_id,
        model_hash: m.model_hash,
        tag_set: m.tag_set,
        seed: m.seed,
        n_fit: m.n_fit,
        map,
        norm,
        gmm,
        posterior,
    })
}

pub fn save_pipeline(p: &PeepholePipeline, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pipeline(p)).map_err(|e| Error::io(path, e))
}

pub fn load_pipeline(path: impl AsRef<Path>) -> Result<PeepholePipeline> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pipeline(&bytes)
}
