//! Synthetic anomaly families and their 0 dB intensity calibration.
//!
//! Every injector acts on one channel column `w` (16 time samples). Intensities
//! are chosen so the expected perturbation energy `E‖w' - w‖²` equals the mean
//! nominal column energy of the training split.

mod inject;

pub use inject::{inject_gwn, inject_impulse, inject_offset, inject_psa, inject_step, psa_angle};

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::telemetry::{ChannelMap, Dataset, Stream, TelemetryChunk, N_CHANNELS, N_WHEELS, WINDOW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnomalyKind {
    #[serde(rename = "GWN")]
    Gwn,
    Offset,
    Impulse,
    #[serde(rename = "PSA")]
    Psa,
    Step,
    Nominal,
}

impl AnomalyKind {
    /// The five injected families, in reporting order.
    pub const INJECTED: [AnomalyKind; 5] = [
        AnomalyKind::Gwn,
        AnomalyKind::Offset,
        AnomalyKind::Impulse,
        AnomalyKind::Psa,
        AnomalyKind::Step,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Gwn => "GWN",
            AnomalyKind::Offset => "Offset",
            AnomalyKind::Impulse => "Impulse",
            AnomalyKind::Psa => "PSA",
            AnomalyKind::Step => "Step",
            AnomalyKind::Nominal => "Nominal",
        }
    }

    /// Position within [`AnomalyKind::INJECTED`].
    pub fn index(self) -> Option<usize> {
        AnomalyKind::INJECTED.iter().position(|&k| k == self)
    }

    /// Parses the CLI spelling: `gwn|offset|impulse|psa|step|all` (comma separated lists allowed).
    pub fn parse_list(spec: &str) -> Result<Vec<AnomalyKind>> {
        let mut kinds = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if part.eq_ignore_ascii_case("all") {
                kinds.extend(AnomalyKind::INJECTED);
            } else {
                let k: AnomalyKind = part.parse()?;
                if k == AnomalyKind::Nominal {
                    return Err(Error::Config("`nominal` is not an injectable anomaly".into()));
                }
                kinds.push(k);
            }
        }
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            return Err(Error::Config(format!("no anomaly kinds in `{spec}`")));
        }
        Ok(kinds)
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gwn" => Ok(AnomalyKind::Gwn),
            "offset" => Ok(AnomalyKind::Offset),
            "impulse" => Ok(AnomalyKind::Impulse),
            "psa" => Ok(AnomalyKind::Psa),
            "step" => Ok(AnomalyKind::Step),
            "nominal" => Ok(AnomalyKind::Nominal),
            _ => Err(Error::Config(format!(
                "unknown anomaly kind `{s}` (expected gwn|offset|impulse|psa|step|all)"
            ))),
        }
    }
}

/// Corruption scenario: all sixteen channels, or the four channels of one wheel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    I,
    II,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::I => "I",
            Scenario::II => "II",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "1" => Ok(Scenario::I),
            "II" | "ii" | "2" => Ok(Scenario::II),
            _ => Err(Error::Config(format!("unknown scenario `{s}` (expected I or II)"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Realized random draws of one corrupted chunk. Vectors are indexed like `channels`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    /// Intensity `a` used for every channel.
    pub a: f64,
    pub channels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub signs: Vec<i8>,
    /// Impulse positions `j`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positions: Vec<u8>,
    /// Step starts `i`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub starts: Vec<u8>,
    /// PSA rotation angle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Channels left untouched because their column had zero norm (PSA only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<u8>,
}

/// Ground truth attached to a chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyTag {
    pub kind: AnomalyKind,
    /// Target wheel, scenario II only.
    pub wheel: Option<u8>,
    pub params: Option<Draw>,
}

impl AnomalyTag {
    pub fn nominal() -> Self {
        AnomalyTag {
            kind: AnomalyKind::Nominal,
            wheel: None,
            params: None,
        }
    }

    pub fn is_valid(&self) -> bool {
        if self.kind == AnomalyKind::Nominal {
            return self.wheel.is_none() && self.params.is_none();
        }
        if self.wheel.is_some_and(|w| w as usize >= N_WHEELS) {
            return false;
        }
        let Some(p) = &self.params else { return true };
        match self.kind {
            AnomalyKind::Impulse => p.positions.iter().all(|&j| (j as usize) < WINDOW),
            AnomalyKind::Step => p.starts.iter().all(|&i| i == 0 || i == 8),
            AnomalyKind::Psa => p.theta.is_some_and(|t| (0.0..=std::f64::consts::PI).contains(&t)),
            _ => true,
        }
    }

    /// `(tag_kind, tag_wheel, tag_param_json)` CSV cells.
    pub fn to_columns(&self) -> (String, String, String) {
        (
            self.kind.name().to_string(),
            self.wheel.map(|w| w.to_string()).unwrap_or_default(),
            self.params
                .as_ref()
                .map(|p| serde_json::to_string(p).expect("draws serialize"))
                .unwrap_or_default(),
        )
    }

    pub fn from_columns(kind: &str, wheel: &str, params: &str) -> std::result::Result<Self, String> {
        let kind: AnomalyKind = kind.parse().map_err(|e: Error| e.to_string())?;
        let wheel = if wheel.is_empty() {
            None
        } else {
            Some(wheel.parse::<u8>().map_err(|_| format!("bad tag_wheel `{wheel}`"))?)
        };
        let params = if params.is_empty() {
            None
        } else {
            Some(serde_json::from_str(params).map_err(|e| format!("bad tag_param_json: {e}"))?)
        };
        let tag = AnomalyTag { kind, wheel, params };
        if !tag.is_valid() {
            return Err(format!("inconsistent tag {tag:?}"));
        }
        Ok(tag)
    }
}

/// Nominal column energy and the per-kind intensities that match it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityCalibration {
    /// Mean of `‖w‖²` over all channel columns of the training chunks.
    pub nominal_energy: f64,
    pub gwn: f64,
    pub offset: f64,
    pub impulse: f64,
    pub step: f64,
    /// PSA intensity; the rotation angle is `arccos(1 - a²/2)`.
    pub psa: f64,
}

impl IntensityCalibration {
    /// Closed-form intensities giving `E‖w' - w‖² = energy` for each family.
    pub fn from_energy(energy: f64) -> Result<Self> {
        if !(energy > 0.0) || !energy.is_finite() {
            return Err(Error::Numeric(format!(
                "cannot calibrate intensities against nominal energy {energy}"
            )));
        }
        let n = WINDOW as f64;
        Ok(IntensityCalibration {
            nominal_energy: energy,
            gwn: (energy / n).sqrt(),
            offset: (energy / n).sqrt(),
            impulse: energy.sqrt(),
            step: (energy / 8.0).sqrt(),
            psa: 1.0,
        })
    }

    pub fn intensity(&self, kind: AnomalyKind) -> f64 {
        match kind {
            AnomalyKind::Gwn => self.gwn,
            AnomalyKind::Offset => self.offset,
            AnomalyKind::Impulse => self.impulse,
            AnomalyKind::Step => self.step,
            AnomalyKind::Psa => self.psa,
            AnomalyKind::Nominal => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in AnomalyKind::INJECTED {
            let a = self.intensity(kind);
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Param(format!("{kind} intensity must be positive, got {a}")));
            }
        }
        if self.psa > 2.0 {
            return Err(Error::Param(format!("PSA intensity {} exceeds 2", self.psa)));
        }
        Ok(())
    }
}

/// Mean squared column norm over a nominal training split.
pub fn calibrate(train: &Dataset) -> Result<IntensityCalibration> {
    if train.is_empty() {
        return Err(Error::Input("calibration needs a non-empty training split".into()));
    }
    if !train.is_nominal() {
        return Err(Error::Input("calibration needs nominal data".into()));
    }
    let total: f64 = train
        .chunks()
        .iter()
        .map(|c| c.values().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let energy = total / (train.len() * N_CHANNELS) as f64;
    IntensityCalibration::from_energy(energy)
}

fn chunk_rng(seed: u64, origin: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(origin);
    rng
}

fn random_sign(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Applies one anomaly family to the given channels of a chunk, recording the draws.
pub fn corrupt_chunk(
    chunk: &TelemetryChunk,
    kind: AnomalyKind,
    channels: &[usize],
    cal: &IntensityCalibration,
    rng: &mut impl Rng,
) -> Result<(TelemetryChunk, Draw)> {
    let a = cal.intensity(kind);
    let mut values = chunk.values().to_owned();
    let mut draw = Draw {
        a,
        channels: channels.iter().map(|&c| c as u8).collect(),
        ..Draw::default()
    };
    for &ch in channels {
        let w = values.column(ch).to_owned();
        let w_new: Array1<f64> = match kind {
            AnomalyKind::Gwn => inject_gwn(w.view(), a, rng),
            AnomalyKind::Offset => {
                let sign = random_sign(rng);
                draw.signs.push(sign as i8);
                inject_offset(w.view(), a, sign)
            }
            AnomalyKind::Impulse => {
                let sign = random_sign(rng);
                let j = rng.random_range(0..WINDOW);
                draw.signs.push(sign as i8);
                draw.positions.push(j as u8);
                inject_impulse(w.view(), a, sign, j)?
            }
            AnomalyKind::Step => {
                let sign = random_sign(rng);
                let i = if rng.random::<bool>() { 8 } else { 0 };
                draw.signs.push(sign as i8);
                draw.starts.push(i as u8);
                inject_step(w.view(), a, sign, i)?
            }
            AnomalyKind::Psa => {
                let theta = psa_angle(a)?;
                draw.theta = Some(theta);
                let (out, degenerate) = inject_psa(w.view(), theta, rng)?;
                if degenerate {
                    draw.degenerate.push(ch as u8);
                }
                out
            }
            AnomalyKind::Nominal => w,
        };
        values.column_mut(ch).assign(&w_new);
    }
    Ok((TelemetryChunk::new(values, chunk.origin())?, draw))
}

/// Corrupts every chunk of a nominal dataset, balancing the requested kinds.
///
/// Kind assignment is a seeded shuffle of `kinds` repeated to the dataset length;
/// per-chunk draws come from a substream keyed by the chunk origin.
pub fn corrupt_dataset(
    ds: &Dataset,
    scenario: Scenario,
    kinds: &[AnomalyKind],
    cal: &IntensityCalibration,
    seed: u64,
) -> Result<Dataset> {
    if ds.is_empty() {
        return Err(Error::Input("cannot corrupt an empty dataset".into()));
    }
    if !ds.is_nominal() {
        return Err(Error::Input("corruption expects a nominal dataset".into()));
    }
    if kinds.is_empty() || kinds.contains(&AnomalyKind::Nominal) {
        return Err(Error::Param("corruption needs at least one injectable kind".into()));
    }
    cal.validate()?;
    let mut assignment: Vec<AnomalyKind> = (0..ds.len()).map(|i| kinds[i % kinds.len()]).collect();
    assignment.shuffle(&mut chunk_rng(seed, u64::MAX));

    let all_channels: Vec<usize> = (0..N_CHANNELS).collect();
    let mut chunks = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for (chunk, &kind) in ds.chunks().iter().zip(&assignment) {
        let mut rng = chunk_rng(seed, chunk.origin());
        let (wheel, channels) = match scenario {
            Scenario::I => (None, all_channels.clone()),
            Scenario::II => {
                let wheel = rng.random_range(0..N_WHEELS);
                (Some(wheel as u8), ChannelMap::channels_of_wheel(wheel).collect())
            }
        };
        let (corrupted, draw) = corrupt_chunk(chunk, kind, &channels, cal, &mut rng)?;
        chunks.push(corrupted);
        labels.push(AnomalyTag {
            kind,
            wheel,
            params: Some(draw),
        });
    }
    Dataset::new(chunks, ds.split(), Some(labels))
}

/// Adds a step of height `a` with an independent random sign per channel to
/// samples `[start, start + length)` of a stream. Returns the signs used.
pub fn inject_step_event(stream: &mut Stream, start: usize, length: usize, a: f64, seed: u64) -> Result<Vec<f64>> {
    if start + length > stream.len() {
        return Err(Error::Param(format!(
            "event [{start}, {}) exceeds stream of {} samples",
            start + length,
            stream.len()
        )));
    }
    let mut rng = chunk_rng(seed, stream.start_index + start as u64);
    let signs: Vec<f64> = (0..N_CHANNELS).map(|_| random_sign(&mut rng)).collect();
    for r in start..start + length {
        for (ch, s) in signs.iter().enumerate() {
            stream.samples[[r, ch]] += s * a;
        }
    }
    Ok(signs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{chunk_stream, generate_stream, GeneratorConfig, Split};

    fn nominal(n_chunks: usize, seed: u64) -> Dataset {
        let stream = generate_stream(&GeneratorConfig::with_defaults(seed, n_chunks * WINDOW)).unwrap();
        Dataset::nominal(chunk_stream(&stream, WINDOW).unwrap(), Split::Validation)
    }

    #[test]
    fn closed_form_intensities() {
        let cal = IntensityCalibration::from_energy(16.0).unwrap();
        assert!((cal.gwn - 1.0).abs() < 1e-15);
        assert!((cal.offset - 1.0).abs() < 1e-15);
        assert!((cal.impulse - 4.0).abs() < 1e-15);
        assert!((cal.step - 2f64.sqrt()).abs() < 1e-15);
        assert!((psa_angle(cal.psa).unwrap() - std::f64::consts::FRAC_PI_3).abs() < 1e-12);
        assert!(IntensityCalibration::from_energy(0.0).is_err());
    }

    #[test]
    fn zero_telemetry_cannot_be_calibrated() {
        let chunk = TelemetryChunk::new(ndarray::Array2::zeros((16, 16)), 0).unwrap();
        let ds = Dataset::nominal(vec![chunk], Split::Train);
        assert!(matches!(calibrate(&ds), Err(Error::Numeric(_))));
    }

    #[test]
    fn calibration_is_homogeneous() {
        let ds = nominal(20, 3);
        let doubled: Vec<_> = ds
            .chunks()
            .iter()
            .map(|c| TelemetryChunk::new(c.values().mapv(|v| 2.0 * v), c.origin()).unwrap())
            .collect();
        let a = calibrate(&ds).unwrap();
        let b = calibrate(&Dataset::nominal(doubled, Split::Train)).unwrap();
        assert!((b.nominal_energy / a.nominal_energy - 4.0).abs() < 1e-12);
        for kind in [AnomalyKind::Gwn, AnomalyKind::Offset, AnomalyKind::Impulse, AnomalyKind::Step] {
            assert!((b.intensity(kind) / a.intensity(kind) - 2.0).abs() < 1e-12);
        }
        assert_eq!(a.psa, b.psa);
    }

    #[test]
    fn scenario_two_touches_only_target_wheel() {
        let ds = nominal(60, 5);
        let cal = calibrate(&ds).unwrap();
        let out = corrupt_dataset(&ds, Scenario::II, &AnomalyKind::INJECTED, &cal, 11).unwrap();
        for ((orig, new), tag) in ds.chunks().iter().zip(out.chunks()).zip(out.labels().unwrap()) {
            let wheel = tag.wheel.expect("scenario II tags a wheel") as usize;
            for ch in 0..N_CHANNELS {
                let same = orig.column(ch) == new.column(ch);
                if ChannelMap::channels_of_wheel(wheel).contains(&ch) {
                    assert!(!same, "{:?} channel {ch} unchanged", tag.kind);
                } else {
                    assert!(same);
                }
            }
        }
    }

    #[test]
    fn scenario_one_touches_every_channel() {
        let ds = nominal(30, 6);
        let cal = calibrate(&ds).unwrap();
        for kind in [AnomalyKind::Offset, AnomalyKind::Impulse, AnomalyKind::Step] {
            let out = corrupt_dataset(&ds, Scenario::I, &[kind], &cal, 1).unwrap();
            for (orig, new) in ds.chunks().iter().zip(out.chunks()) {
                for ch in 0..N_CHANNELS {
                    assert_ne!(orig.column(ch), new.column(ch));
                }
            }
            assert!(out.labels().unwrap().iter().all(|t| t.kind == kind && t.wheel.is_none()));
        }
    }

    #[test]
    fn kinds_are_balanced() {
        let ds = nominal(500, 8);
        let cal = calibrate(&ds).unwrap();
        let out = corrupt_dataset(&ds, Scenario::I, &AnomalyKind::INJECTED, &cal, 2).unwrap();
        for kind in AnomalyKind::INJECTED {
            let n = out.labels().unwrap().iter().filter(|t| t.kind == kind).count();
            assert_eq!(n, 100);
        }
        let odd = corrupt_dataset(&ds.truncated(498), Scenario::I, &AnomalyKind::INJECTED, &cal, 2)
            .unwrap();
        let counts: Vec<usize> = AnomalyKind::INJECTED
            .iter()
            .map(|&k| odd.labels().unwrap().iter().filter(|t| t.kind == k).count())
            .collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn corruption_is_reproducible() {
        let ds = nominal(40, 9);
        let cal = calibrate(&ds).unwrap();
        let a = corrupt_dataset(&ds, Scenario::I, &AnomalyKind::INJECTED, &cal, 77).unwrap();
        let b = corrupt_dataset(&ds, Scenario::I, &AnomalyKind::INJECTED, &cal, 77).unwrap();
        for (x, y) in a.chunks().iter().zip(b.chunks()) {
            let bx: Vec<u64> = x.values().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn perturbation_energy_matches_calibration() {
        let train = nominal(400, 10);
        let cal = calibrate(&train).unwrap();
        let val = nominal(500, 12);
        for kind in AnomalyKind::INJECTED {
            let out = corrupt_dataset(&val, Scenario::I, &[kind], &cal, 3).unwrap();
            let mut total = 0.0;
            for (orig, new) in val.chunks().iter().zip(out.chunks()) {
                total += (&new.values() - &orig.values()).mapv(|d| d * d).sum();
            }
            let ratio = total / (val.len() * N_CHANNELS) as f64 / cal.nominal_energy;
            assert!((0.9..=1.1).contains(&ratio), "{kind}: {ratio}");
        }
    }

    #[test]
    fn tag_columns_round_trip() {
        let ds = nominal(10, 4);
        let cal = calibrate(&ds).unwrap();
        let out = corrupt_dataset(&ds, Scenario::II, &AnomalyKind::INJECTED, &cal, 5).unwrap();
        for tag in out.labels().unwrap() {
            assert!(tag.is_valid());
            let (k, w, p) = tag.to_columns();
            assert_eq!(&AnomalyTag::from_columns(&k, &w, &p).unwrap(), tag);
        }
        let nominal = AnomalyTag::nominal();
        let (k, w, p) = nominal.to_columns();
        assert_eq!(AnomalyTag::from_columns(&k, &w, &p).unwrap(), nominal);
    }

    #[test]
    fn kind_spec_parsing() {
        assert_eq!(AnomalyKind::parse_list("all").unwrap(), AnomalyKind::INJECTED.to_vec());
        assert_eq!(AnomalyKind::parse_list("offset").unwrap(), vec![AnomalyKind::Offset]);
        assert_eq!(
            AnomalyKind::parse_list("step,gwn").unwrap(),
            vec![AnomalyKind::Gwn, AnomalyKind::Step]
        );
        assert!(AnomalyKind::parse_list("spike").is_err());
    }

    #[test]
    fn step_event_in_stream() {
        let mut stream = generate_stream(&GeneratorConfig::with_defaults(1, 64)).unwrap();
        let before = stream.clone();
        let signs = inject_step_event(&mut stream, 20, 8, 0.5, 3).unwrap();
        for r in 0..64 {
            for ch in 0..N_CHANNELS {
                let d = stream.samples[[r, ch]] - before.samples[[r, ch]];
                if (20..28).contains(&r) {
                    assert!((d - 0.5 * signs[ch]).abs() < 1e-12);
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }
}
