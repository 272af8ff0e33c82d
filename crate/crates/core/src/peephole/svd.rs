use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;

/// Singular values below this fraction of `σ₁` are treated as zero when
/// recovering the opposite singular vectors from the Gram eigenvectors.
const RANK_TOL: f64 = 1e-7;

/// Top-κ singular triplet of the augmented layer matrix `A = [W | b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedMap {
    /// `Q′`, `(n+1) × κ`.
    pub q: Array2<f64>,
    /// `Σ′`, non-increasing.
    pub sigma: Array1<f64>,
    /// `P′`, `rows × κ`.
    pub p: Array2<f64>,
    /// Every singular value of `A`, for truncation-error checks.
    pub spectrum: Array1<f64>,
    pub pipeline_id: String,
}

impl ReducedMap {
    pub fn kappa(&self) -> usize {
        self.sigma.len()
    }

    /// Length of the activation `x` (without the appended 1).
    pub fn input_dim(&self) -> usize {
        self.q.nrows() - 1
    }

    /// `P′ Σ′ Q′ᵀ`.
    pub fn reconstruct(&self) -> Array2<f64> {
        (&self.p * &self.sigma).dot(&self.q.t())
    }

    /// `√(Σ_{i>κ} σᵢ²)`, the Frobenius error of the rank-κ truncation.
    pub fn truncation_error(&self) -> f64 {
        self.spectrum.iter().skip(self.kappa()).map(|s| s * s).sum::<f64>().sqrt()
    }

    /// Maps core vectors back to layer pre-activations, `P′ Σ′ v`.
    pub fn lift(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        self.p.dot(&(&self.sigma * &v))
    }
}

pub fn augment(w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    if b.len() != w.nrows() {
        return Err(Error::Input(format!("bias has {} entries for {} rows", b.len(), w.nrows())));
    }
    Ok(concatenate![Axis(1), w, b.insert_axis(Axis(1))])
}

/// Thin SVD `A = P diag(σ) Qᵀ` through the eigendecomposition of the smaller
/// Gram matrix. Returns `min(rows, cols)` triplets.
pub fn thin_svd(a: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    if a.is_empty() {
        return Err(Error::Input("empty matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    let wide = a.nrows() <= a.ncols();
    let gram = if wide { a.dot(&a.t()) } else { a.t().dot(&a) };
    let gram = (&gram + &gram.t()) * 0.5;
    let (lambda, near) = sym_eigen(gram.view())?;
    let sigma = lambda.mapv(|l| l.max(0.0).sqrt());
    let far = if wide { a.t().dot(&near) } else { a.dot(&near) };
    let far = complete_basis(far, &sigma);
    Ok(if wide { (near, sigma, far) } else { (far, sigma, near) })
}

/// Divides column `i` by `σᵢ`; columns with `σᵢ ≈ 0` are replaced by an
/// orthonormal completion.
fn complete_basis(mut m: Array2<f64>, sigma: &Array1<f64>) -> Array2<f64> {
    let cutoff = RANK_TOL * sigma[0];
    let mut canonical = 0;
    for i in 0..sigma.len() {
        if sigma[i] > cutoff && sigma[i] > 0.0 {
            m.column_mut(i).mapv_inplace(|x| x / sigma[i]);
            continue;
        }
        loop {
            let mut e = Array1::<f64>::zeros(m.nrows());
            e[canonical] = 1.0;
            canonical += 1;
            for _ in 0..2 {
                for j in 0..i {
                    let c = m.column(j);
                    let proj = c.dot(&e);
                    e.scaled_add(-proj, &c);
                }
            }
            let norm = e.dot(&e).sqrt();
            if norm > 0.1 {
                m.column_mut(i).assign(&(e / norm));
                break;
            }
        }
    }
    m
}

/// Rank-κ reduction of the dense layer `y = W x + b`.
pub fn build_reduced_map(w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>, kappa: usize) -> Result<ReducedMap> {
    let a = augment(w, b)?;
    let bound = a.nrows().min(a.ncols());
    if kappa == 0 || kappa > bound {
        return Err(Error::Param(format!("κ = {kappa} outside 1..={bound}")));
    }
    let (p, spectrum, q) = thin_svd(a.view())?;
    Ok(ReducedMap {
        q: q.slice(s![.., ..kappa]).to_owned(),
        sigma: spectrum.slice(s![..kappa]).to_owned(),
        p: p.slice(s![.., ..kappa]).to_owned(),
        spectrum,
        pipeline_id: String::new(),
    })
}

/// `v = Q′ᵀ [x; 1]`.
pub fn core_vector(x: ArrayView1<'_, f64>, map: &ReducedMap) -> Result<Array1<f64>> {
    if x.len() != map.input_dim() {
        return Err(Error::Input(format!(
            "activation has {} entries, map expects {}",
            x.len(),
            map.input_dim()
        )));
    }
    let n = map.input_dim();
    Ok(map.q.slice(s![..n, ..]).t().dot(&x) + map.q.row(n))
}

/// Core vectors of every row of `x`.
pub fn core_vectors(x: ArrayView2<'_, f64>, map: &ReducedMap) -> Result<Array2<f64>> {
    if x.ncols() != map.input_dim() {
        return Err(Error::Input(format!(
            "activations have {} columns, map expects {}",
            x.ncols(),
            map.input_dim()
        )));
    }
    let n = map.input_dim();
    Ok(x.dot(&map.q.slice(s![..n, ..])) + map.q.row(n))
}
