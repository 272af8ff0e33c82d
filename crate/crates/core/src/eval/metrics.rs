use ndarray::Array2;

use crate::anomaly::{AnomalyKind, Scenario};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AucResult {
    pub value: f64,
    pub n_nominal: usize,
    pub n_anomalous: usize,
    pub scenario: Option<Scenario>,
    pub kind: Option<AnomalyKind>,
}

/// Probability that an anomalous score exceeds a nominal one, ties counting
/// one half. Computed from mid-ranks in `O(n log n)`.
pub fn auc(scores_nominal: &[f64], scores_anomalous: &[f64]) -> Result<AucResult> {
    let (n0, n1) = (scores_nominal.len(), scores_anomalous.len());
    if n0 == 0 || n1 == 0 {
        return Err(Error::Input("AUC needs non-empty nominal and anomalous score lists".into()));
    }
    if scores_nominal.iter().chain(scores_anomalous).any(|s| s.is_nan()) {
        return Err(Error::Input("AUC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_nominal
        .iter()
        .map(|&s| (s, false))
        .chain(scores_anomalous.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the rank sum of the anomalous scores, using 1-based mid-ranks.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let doubled_mid = (i + 1 + j + 1) as u128;
        let hits = all[i..=j].iter().filter(|e| e.1).count() as u128;
        doubled_rank_sum += doubled_mid * hits;
        i = j + 1;
    }
    let n1w = n1 as u128;
    let doubled_u = doubled_rank_sum - n1w * (n1w + 1);
    Ok(AucResult {
        value: doubled_u as f64 / (2 * n0 as u128 * n1w) as f64,
        n_nominal: n0,
        n_anomalous: n1,
        scenario: None,
        kind: None,
    })
}

/// Rows are true tags, columns predicted tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Array2<u64>,
    /// Row-normalized counts; rows without samples are zero.
    pub probabilities: Array2<f64>,
    pub empty_rows: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Mean of the diagonal over rows that have samples.
    pub fn mean_diagonal(&self) -> f64 {
        let rows: Vec<usize> = (0..self.labels.len()).filter(|r| !self.empty_rows.contains(r)).collect();
        rows.iter().map(|&r| self.probabilities[[r, r]]).sum::<f64>() / rows.len().max(1) as f64
    }

    /// Fraction of all samples on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.labels.len()).map(|i| self.counts[[i, i]]).sum();
        hits as f64 / self.total().max(1) as f64
    }

    /// Largest predicted-column mean over non-empty rows, minus chance.
    pub fn bias_index(&self) -> f64 {
        let k = self.labels.len();
        let rows: Vec<usize> = (0..k).filter(|r| !self.empty_rows.contains(r)).collect();
        if rows.is_empty() {
            return 0.0;
        }
        let best = (0..k)
            .map(|c| rows.iter().map(|&r| self.probabilities[[r, c]]).sum::<f64>() / rows.len() as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        best - 1.0 / k as f64
    }
}

/// Counts `(true, predicted)` index pairs and row-normalizes.
pub fn confusion(true_tags: &[usize], predicted_tags: &[usize], labels: &[String]) -> Result<ConfusionMatrix> {
    if true_tags.len() != predicted_tags.len() {
        return Err(Error::Input(format!(
            "{} true tags but {} predictions",
            true_tags.len(),
            predicted_tags.len()
        )));
    }
    let k = labels.len();
    let mut counts = Array2::<u64>::zeros((k, k));
    for (&t, &p) in true_tags.iter().zip(predicted_tags) {
        if t >= k || p >= k {
            return Err(Error::Input(format!("tag index outside the {k}-tag vocabulary")));
        }
        counts[[t, p]] += 1;
    }
    let mut probabilities = Array2::<f64>::zeros((k, k));
    let mut empty_rows = Vec::new();
    for r in 0..k {
        let total: u64 = counts.row(r).sum();
        if total == 0 {
            empty_rows.push(r);
            continue;
        }
        for c in 0..k {
            probabilities[[r, c]] = counts[[r, c]] as f64 / total as f64;
        }
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
        probabilities,
        empty_rows,
    })
}

/// One scenario-II localization outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WheelOutcome {
    pub kind: AnomalyKind,
    pub true_wheel: usize,
    pub predicted_wheel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasPanel {
    /// `None` for the panel pooling every kind.
    pub kind: Option<AnomalyKind>,
    pub matrix: ConfusionMatrix,
    pub bias_index: f64,
}

/// The pooled wheel confusion matrix followed by one panel per anomaly kind.
pub fn bias_report(outcomes: &[WheelOutcome], labels: &[String]) -> Result<Vec<BiasPanel>> {
    let panel = |kind: Option<AnomalyKind>| -> Result<Option<BiasPanel>> {
        let selected: Vec<&WheelOutcome> = outcomes.iter().filter(|o| kind.is_none_or(|k| o.kind == k)).collect();
        if selected.is_empty() {
            return Ok(None);
        }
        let t: Vec<usize> = selected.iter().map(|o| o.true_wheel).collect();
        let p: Vec<usize> = selected.iter().map(|o| o.predicted_wheel).collect();
        let matrix = confusion(&t, &p, labels)?;
        let bias_index = matrix.bias_index();
        Ok(Some(BiasPanel { kind, matrix, bias_index }))
    };
    let mut panels = Vec::new();
    match panel(None)? {
        Some(p) => panels.push(p),
        None => return Err(Error::Input("no localization outcomes to report".into())),
    }
    for kind in AnomalyKind::INJECTED {
        match panel(Some(kind))? {
            Some(p) => panels.push(p),
            None => log::warn!("no {} outcomes: panel omitted", kind.name()),
        }
    }
    Ok(panels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(nom: &[f64], anom: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in nom {
            for &b in anom {
                if a < b {
                    s += 1.0;
                } else if a == b {
                    s += 0.5;
                }
            }
        }
        s / (nom.len() * anom.len()) as f64
    }

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("L{i}")).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap().value, 1.0);
        assert_eq!(auc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().value, 0.5);
        assert_eq!(auc(&[1.0, 3.0], &[2.0, 4.0]).unwrap().value, 0.75);
        assert!(auc(&[], &[1.0]).is_err());
        assert!(auc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let n0 = rng.random_range(1..120);
            let n1 = rng.random_range(1..80);
            let nom: Vec<f64> = (0..n0).map(|_| rng.random_range(0..20) as f64).collect();
            let anom: Vec<f64> = (0..n1).map(|_| rng.random_range(5..25) as f64).collect();
            assert_eq!(auc(&nom, &anom).unwrap().value, brute_force(&nom, &anom));
        }
    }

    #[test]
    fn confusion_examples() {
        let l = labels(2);
        let m = confusion(&[0, 1], &[0, 1], &l).unwrap();
        assert_eq!(m.probabilities, Array2::<f64>::eye(2));
        let m = confusion(&[0, 0, 1], &[0, 1, 1], &l).unwrap();
        assert_eq!(m.probabilities.row(0).to_vec(), vec![0.5, 0.5]);
        assert_eq!(m.probabilities.row(1).to_vec(), vec![0.0, 1.0]);
        assert_eq!(m.total(), 3);
        assert!(confusion(&[2], &[0], &l).is_err());
    }

    #[test]
    fn single_class_input() {
        let m = confusion(&[1, 1, 1], &[0, 1, 2], &labels(3)).unwrap();
        assert_eq!(m.empty_rows, vec![0, 2]);
        assert!((m.probabilities.row(1).sum() - 1.0).abs() < 1e-12);
        assert_eq!(m.probabilities.row(0).sum(), 0.0);
    }

    fn outcomes(n: usize, pred: impl Fn(usize, &mut ChaCha8Rng) -> usize) -> Vec<WheelOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|i| WheelOutcome {
                kind: AnomalyKind::INJECTED[i % 5],
                true_wheel: i % 4,
                predicted_wheel: pred(i, &mut rng),
            })
            .collect()
    }

    #[test]
    fn bias_index_null_and_extreme() {
        let l = labels(4);
        let uniform = bias_report(&outcomes(4000, |_, r| r.random_range(0..4)), &l).unwrap();
        assert!(uniform[0].bias_index.abs() < 0.05, "{}", uniform[0].bias_index);
        let all_zero = bias_report(&outcomes(400, |_, _| 0), &l).unwrap();
        assert!((all_zero[0].bias_index - 0.75).abs() < 1e-12);
        assert_eq!(all_zero.len(), 6);
    }

    #[test]
    fn missing_kind_drops_panel() {
        let o: Vec<WheelOutcome> = outcomes(40, |i, _| i % 4)
            .into_iter()
            .filter(|o| o.kind != AnomalyKind::Psa)
            .collect();
        let panels = bias_report(&o, &labels(4)).unwrap();
        assert_eq!(panels.len(), 5);
        assert!(panels.iter().all(|p| p.kind != Some(AnomalyKind::Psa)));
        assert_eq!(panels[0].matrix.accuracy(), 1.0);
    }
}
