//! Peepholes: the latent dense layer's input activation is reduced to a core
//! vector through the layer's top singular directions, softly clustered by a
//! Gaussian mixture, and mapped to a probability vector over human-level tags.

mod gmm;
mod io;
mod norm;
mod posterior;
mod svd;

pub use gmm::{gmm_fit, membership, membership_from_log, memberships, GmmModel, Membership, COV_REG, MAX_ITER, REL_TOL, RESTARTS};
pub use io::{decode_pipeline, encode_pipeline, load_pipeline, save_pipeline, PIPELINE_MAGIC, PIPELINE_VERSION};
pub use norm::{fit_norm, NormStats, MIN_STD};
pub use posterior::{argmax, estimate_posterior, PosteriorMatrix};
pub use svd::{augment, build_reduced_map, core_vector, core_vectors, thin_svd, ReducedMap};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{AnomalyKind, AnomalyTag};
use crate::autoencoder::{model_hash, AutoencoderModel};
use crate::error::{Error, Result};
use crate::telemetry::{Dataset, TelemetryChunk, N_WHEELS};

pub const DEFAULT_KAPPA: usize = 50;
pub const DEFAULT_COMPONENTS: usize = 50;

/// Which human-level feature the peephole speaks about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagSet {
    /// The five anomaly families.
    Kinds,
    /// The faulty reaction wheel, `RW0..RW3`.
    Wheels,
}

impl TagSet {
    pub fn name(self) -> &'static str {
        match self {
            TagSet::Kinds => "kinds",
            TagSet::Wheels => "wheels",
        }
    }

    pub fn vocabulary(self) -> Vec<String> {
        match self {
            TagSet::Kinds => AnomalyKind::INJECTED.iter().map(|k| k.name().to_string()).collect(),
            TagSet::Wheels => (0..N_WHEELS).map(|w| format!("RW{w}")).collect(),
        }
    }

    /// Ground-truth row index of `tag`, if the tag carries this feature.
    pub fn label(self, tag: &AnomalyTag) -> Option<usize> {
        match self {
            TagSet::Kinds => tag.kind.index(),
            TagSet::Wheels => tag.wheel.map(usize::from),
        }
    }
}

impl fmt::Display for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TagSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kinds" => Ok(TagSet::Kinds),
            "wheels" => Ok(TagSet::Wheels),
            _ => Err(Error::Config(format!("unknown tag set `{s}` (expected kinds or wheels)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeepholeReport {
    pub origin: u64,
    /// Cluster membership, sums to 1.
    pub d: Array1<f64>,
    /// Tag probabilities `U d`, sums to 1.
    pub p: Array1<f64>,
    /// `argmax p`, lowest index on ties.
    pub predicted: usize,
    pub out_of_distribution: bool,
}

impl PeepholeReport {
    pub fn cluster(&self) -> usize {
        argmax(self.d.view())
    }
}

fn check_ids(map: &ReducedMap, stats: &NormStats, gmm: &GmmModel, u: &PosteriorMatrix) -> Result<()> {
    let id = &map.pipeline_id;
    for (what, other) in [("normalization", &stats.pipeline_id), ("mixture", &gmm.pipeline_id), ("posterior", &u.pipeline_id)] {
        if other != id {
            return Err(Error::Mismatch(format!(
                "{what} artifact belongs to pipeline `{other}`, reduced map to `{id}`"
            )));
        }
    }
    if map.kappa() != stats.dim() || stats.dim() != gmm.dim() || gmm.n_components() != u.n_clusters() {
        return Err(Error::Mismatch("artifact dimensions disagree".into()));
    }
    Ok(())
}

fn report_from_core(v: ArrayView1<'_, f64>, stats: &NormStats, gmm: &GmmModel, u: &PosteriorMatrix) -> PeepholeReport {
    let m = membership(stats.normalize(v).view(), gmm);
    let p = u.peephole(m.d.view());
    PeepholeReport {
        origin: 0,
        predicted: argmax(p.view()),
        d: m.d,
        p,
        out_of_distribution: m.out_of_distribution,
    }
}

/// `v → v̂ → d → p = U d` for one latent-layer input activation.
pub fn extract(
    x_latent_in: ArrayView1<'_, f64>,
    map: &ReducedMap,
    stats: &NormStats,
    gmm: &GmmModel,
    u: &PosteriorMatrix,
) -> Result<PeepholeReport> {
    check_ids(map, stats, gmm, u)?;
    let v = core_vector(x_latent_in, map)?;
    Ok(report_from_core(v.view(), stats, gmm, u))
}

/// Every fitted artifact for one tag set, tied together by a pipeline id.
#[derive(Clone, Debug, PartialEq)]
pub struct PeepholePipeline {
    pub id: String,
    pub model_hash: String,
    pub tag_set: TagSet,
    pub seed: u64,
    /// Flagged chunks the statistics were fitted on.
    pub n_fit: usize,
    pub map: ReducedMap,
    pub norm: NormStats,
    pub gmm: GmmModel,
    pub posterior: PosteriorMatrix,
}

/// Score of one chunk and, when flagged, its peephole.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkExplanation {
    pub origin: u64,
    pub score: f64,
    pub flagged: bool,
    pub report: Option<PeepholeReport>,
}

/// SHA-256 over chunk origins, values and labels.
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update([ds.split() as u8]);
    for (i, c) in ds.chunks().iter().enumerate() {
        h.update(c.origin().to_le_bytes());
        for v in c.values().iter() {
            h.update(v.to_le_bytes());
        }
        if let Some(tag) = ds.labels().map(|l| &l[i]) {
            h.update(tag.kind.name().as_bytes());
            h.update([tag.wheel.unwrap_or(u8::MAX)]);
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn pipeline_id(model_hash: &str, data: &str, seed: u64, kappa: usize, c: usize, tag_set: TagSet) -> String {
    crate::util::sha256_hex(format!("{model_hash}|{data}|{seed}|{kappa}|{c}|{tag_set}").as_bytes())
}

/// Scores and core vectors of `chunks` in one batched pass.
fn score_and_project(model: &AutoencoderModel, map: &ReducedMap, chunks: &[TelemetryChunk]) -> Vec<(f64, Array1<f64>)> {
    model.map_batches(chunks, |_, out| {
        let vs = core_vectors(out.forward.latent_input.view(), map).expect("latent width matches the map");
        out.scores.into_iter().zip(vs.rows().into_iter().map(|r| r.to_owned())).collect()
    })
}

/// Fits map, normalization, mixture and posterior on the chunks of
/// `corrupted_val` that the detector flags.
pub fn fit_pipeline(
    model: &AutoencoderModel,
    corrupted_val: &Dataset,
    kappa: usize,
    c: usize,
    tag_set: TagSet,
    seed: u64,
) -> Result<PeepholePipeline> {
    if model.threshold.is_none() {
        return Err(Error::Input("the detector threshold must be set before fitting peepholes".into()));
    }
    let labels = corrupted_val
        .labels()
        .ok_or_else(|| Error::Input("peephole fitting needs a labeled dataset".into()))?;
    let (w, b) = model.latent_layer();
    let mut map = build_reduced_map(w.view(), b.view(), kappa)?;

    let projected = score_and_project(model, &map, corrupted_val.chunks());
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    for (i, (score, v)) in projected.iter().enumerate() {
        if !model.flag(*score) {
            continue;
        }
        let label = tag_set.label(&labels[i]).ok_or_else(|| {
            Error::Input(format!(
                "chunk {} carries no {tag_set} label",
                corrupted_val.chunks()[i].origin()
            ))
        })?;
        rows.push(v.view());
        tags.push(label);
    }
    log::info!(
        "peephole fit ({tag_set}): {} of {} chunks flagged",
        rows.len(),
        corrupted_val.len()
    );
    if rows.len() < c.max(2) {
        return Err(Error::Input(format!(
            "only {} flagged chunks to fit {c} components; lower C or enlarge the corrupted set",
            rows.len()
        )));
    }
    let vs = ndarray::stack(ndarray::Axis(0), &rows).expect("equal lengths");
    let mut norm = fit_norm(vs.view())?;
    let vn = norm.normalize_rows(vs.view());
    let mut gmm = gmm_fit(vn.view(), c, seed)?;
    let pairs: Vec<(usize, usize)> = memberships(vn.view(), &gmm)
        .iter()
        .zip(&tags)
        .map(|(m, &t)| (t, argmax(m.d.view())))
        .collect();
    let mut posterior = estimate_posterior(&pairs, &tag_set.vocabulary(), c)?;

    let model_hash = model_hash(model);
    let id = pipeline_id(&model_hash, &dataset_digest(corrupted_val), seed, kappa, c, tag_set);
    map.pipeline_id = id.clone();
    norm.pipeline_id = id.clone();
    gmm.pipeline_id = id.clone();
    posterior.pipeline_id = id.clone();
    Ok(PeepholePipeline {
        id,
        model_hash,
        tag_set,
        seed,
        n_fit: rows.len(),
        map,
        norm,
        gmm,
        posterior,
    })
}

impl PeepholePipeline {
    pub fn kappa(&self) -> usize {
        self.map.kappa()
    }

    pub fn n_components(&self) -> usize {
        self.gmm.n_components()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.posterior.vocabulary
    }

    pub fn extract(&self, x_latent_in: ArrayView1<'_, f64>) -> Result<PeepholeReport> {
        extract(x_latent_in, &self.map, &self.norm, &self.gmm, &self.posterior)
    }

    /// Refuses a detector other than the one the pipeline was fitted with.
    pub fn check_model(&self, model: &AutoencoderModel) -> Result<()> {
        let hash = model_hash(model);
        if hash != self.model_hash {
            return Err(Error::Mismatch(format!(
                "pipeline {} was fitted on model {}, got model {hash}",
                self.id, self.model_hash
            )));
        }
        Ok(())
    }

    /// Scores every chunk and attaches peepholes to the flagged ones.
    pub fn explain_chunks(&self, model: &AutoencoderModel, chunks: &[TelemetryChunk]) -> Result<Vec<ChunkExplanation>> {
        self.check_model(model)?;
        check_ids(&self.map, &self.norm, &self.gmm, &self.posterior)?;
        let projected = score_and_project(model, &self.map, chunks);
        Ok(projected
            .into_iter()
            .zip(chunks)
            .map(|((score, v), chunk)| {
                let flagged = model.flag(score);
                let report = flagged.then(|| {
                    let mut r = report_from_core(v.view(), &self.norm, &self.gmm, &self.posterior);
                    r.origin = chunk.origin();
                    r
                });
                ChunkExplanation {
                    origin: chunk.origin(),
                    score,
                    flagged,
                    report,
                }
            })
            .collect())
    }

    /// Core vectors of `chunks` (unnormalized), one row each.
    pub fn core_vectors(&self, model: &AutoencoderModel, chunks: &[TelemetryChunk]) -> Array2<f64> {
        let rows: Vec<Array1<f64>> = score_and_project(model, &self.map, chunks).into_iter().map(|(_, v)| v).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::stack(ndarray::Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, self.kappa())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy(id: &str) -> (ReducedMap, NormStats, GmmModel, PosteriorMatrix) {
        let map = ReducedMap {
            q: array![[1.0], [0.0]],
            sigma: array![1.0],
            p: array![[1.0]],
            spectrum: array![1.0],
            pipeline_id: id.into(),
        };
        let stats = fit_norm(array![[-1.0], [1.0]].view()).unwrap();
        let mut gmm = GmmModel::from_parts(array![0.5, 0.5], array![[0.0], [2.0]], vec![array![[1.0]], array![[1.0]]]).unwrap();
        gmm.pipeline_id = id.into();
        let mut u = estimate_posterior(&[(0, 0), (1, 1)], &TagSet::Kinds.vocabulary()[..2], 2).unwrap();
        u.pipeline_id = id.into();
        (map, NormStats { pipeline_id: id.into(), ..stats }, gmm, u)
    }

    #[test]
    fn identity_posterior_passes_membership_through() {
        let (map, stats, gmm, u) = toy("a");
        let r = extract(array![0.0].view(), &map, &stats, &gmm, &u).unwrap();
        assert_eq!(r.p, r.d);
        assert!((r.d[0] - 0.8808).abs() < 1e-4);
        assert_eq!(r.predicted, 0);
        assert!((r.p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn foreign_artifacts_are_refused() {
        let (map, stats, _, u) = toy("a");
        let (_, _, gmm, _) = toy("b");
        assert!(matches!(
            extract(array![0.0].view(), &map, &stats, &gmm, &u),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn tag_sets() {
        assert_eq!(TagSet::Kinds.vocabulary(), vec!["GWN", "Offset", "Impulse", "PSA", "Step"]);
        assert_eq!(TagSet::Wheels.vocabulary().len(), 4);
        assert_eq!("wheels".parse::<TagSet>().unwrap(), TagSet::Wheels);
        assert!("colors".parse::<TagSet>().is_err());
        let tag = AnomalyTag {
            kind: AnomalyKind::Psa,
            wheel: Some(2),
            params: None,
        };
        assert_eq!(TagSet::Kinds.label(&tag), Some(3));
        assert_eq!(TagSet::Wheels.label(&tag), Some(2));
        assert_eq!(TagSet::Wheels.label(&AnomalyTag::nominal()), None);
    }

    #[test]
    fn defaults() {
        assert_eq!((DEFAULT_KAPPA, DEFAULT_COMPONENTS), (50, 50));
    }
}
