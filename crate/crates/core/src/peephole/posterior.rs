use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Tag-given-cluster probabilities, `T × C`, column-stochastic.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    pub vocabulary: Vec<String>,
    /// Joint event counts `u_{i,j}`.
    pub counts: Array2<u64>,
    pub u: Array2<f64>,
    /// Clusters that never received an assignment; their column is uniform.
    pub empty_columns: Vec<usize>,
    pub pipeline_id: String,
}

impl PosteriorMatrix {
    pub fn n_tags(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_clusters(&self) -> usize {
        self.u.ncols()
    }

    /// `p = U d`.
    pub fn peephole(&self, d: ArrayView1<'_, f64>) -> Array1<f64> {
        self.u.dot(&d)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Counts `(tag, cluster)` pairs and normalizes each cluster column.
pub fn estimate_posterior(pairs: &[(usize, usize)], vocabulary: &[String], n_clusters: usize) -> Result<PosteriorMatrix> {
    let t = vocabulary.len();
    if pairs.is_empty() {
        return Err(Error::Input("no (tag, cluster) pairs to count".into()));
    }
    if t == 0 || n_clusters == 0 {
        return Err(Error::Param("empty tag vocabulary or zero clusters".into()));
    }
    let mut counts = Array2::<u64>::zeros((t, n_clusters));
    for &(i, j) in pairs {
        if i >= t || j >= n_clusters {
            return Err(Error::Input(format!("pair ({i}, {j}) outside {t} tags x {n_clusters} clusters")));
        }
        counts[[i, j]] += 1;
    }
    let mut u = Array2::<f64>::zeros((t, n_clusters));
    let mut empty_columns = Vec::new();
    for j in 0..n_clusters {
        let total: u64 = counts.column(j).sum();
        if total == 0 {
            empty_columns.push(j);
            u.column_mut(j).fill(1.0 / t as f64);
        } else {
            for i in 0..t {
                u[[i, j]] = counts[[i, j]] as f64 / total as f64;
            }
        }
    }
    Ok(PosteriorMatrix {
        vocabulary: vocabulary.to_vec(),
        counts,
        u,
        empty_columns,
        pipeline_id: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab(t: usize) -> Vec<String> {
        (0..t).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn pure_clusters_give_identity() {
        let p = estimate_posterior(&[(0, 0), (0, 0), (1, 1), (1, 1)], &vocab(2), 2).unwrap();
        assert_eq!(p.u, Array2::<f64>::eye(2));
    }

    #[test]
    fn direct_ratios() {
        let p = estimate_posterior(&[(0, 0), (1, 0), (1, 0), (0, 1)], &vocab(2), 2).unwrap();
        assert_eq!(p.u.column(0).to_vec(), vec![1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(p.u.column(1).to_vec(), vec![1.0, 0.0]);
        assert_eq!(p.counts[[1, 0]], 2);
    }

    #[test]
    fn unassigned_cluster_is_uniform() {
        let p = estimate_posterior(&[(0, 0), (1, 1), (0, 2)], &vocab(2), 4).unwrap();
        assert_eq!(p.u.column(3).to_vec(), vec![0.5, 0.5]);
        assert_eq!(p.empty_columns, vec![3]);
        for c in p.u.columns() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(estimate_posterior(&[], &vocab(2), 2).is_err());
        assert!(estimate_posterior(&[(2, 0)], &vocab(2), 2).is_err());
    }

    #[test]
    fn peephole_of_basis_vector_is_column() {
        let p = estimate_posterior(&[(0, 0), (1, 0), (1, 1)], &vocab(2), 2).unwrap();
        assert_eq!(p.peephole(array![1.0, 0.0].view()), p.u.column(0).to_owned());
        assert_eq!(argmax(array![0.2, 0.4, 0.4].view()), 1);
    }
}
