use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, lower_inverse};

/// Ridge added to every covariance after each M-step.
pub const COV_REG: f64 = 1e-6;
pub const MAX_ITER: usize = 500;
/// EM stops once the log-likelihood gain falls below this fraction of `|LL|`.
pub const REL_TOL: f64 = 1e-6;
pub const RESTARTS: usize = 3;

#[derive(Clone, Debug)]
struct Factor {
    /// `L⁻¹` for `K = L Lᵀ`.
    inv_chol: Array2<f64>,
    /// `-½ (κ log 2π + log det K)`.
    log_norm: f64,
}

/// Full-covariance Gaussian mixture over normalized core vectors.
#[derive(Clone, Debug)]
pub struct GmmModel {
    pub weights: Array1<f64>,
    /// `C × κ`.
    pub means: Array2<f64>,
    pub covariances: Vec<Array2<f64>>,
    /// Log-likelihood after each E-step of the kept restart.
    pub log_likelihood: Vec<f64>,
    pub seed: u64,
    pub restart: usize,
    pub converged: bool,
    pub pipeline_id: String,
    factors: Vec<Factor>,
}

impl PartialEq for GmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.covariances == other.covariances
            && self.log_likelihood == other.log_likelihood
            && self.seed == other.seed
            && self.restart == other.restart
            && self.converged == other.converged
            && self.pipeline_id == other.pipeline_id
    }
}

fn factorize(covariances: &[Array2<f64>]) -> Result<Vec<Factor>> {
    covariances
        .par_iter()
        .enumerate()
        .map(|(k, cov)| {
            let l = cholesky(cov.view())
                .map_err(|e| Error::Numeric(format!("covariance of component {k} is singular: {e}")))?;
            let log_det: f64 = 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();
            Ok(Factor {
                inv_chol: lower_inverse(l.view()),
                log_norm: -0.5 * (cov.nrows() as f64 * (2.0 * PI).ln() + log_det),
            })
        })
        .collect()
}

impl GmmModel {
    /// Validates the parameters and precomputes the Cholesky factors.
    pub fn from_parts(weights: Array1<f64>, means: Array2<f64>, covariances: Vec<Array2<f64>>) -> Result<Self> {
        let c = weights.len();
        if c == 0 || means.nrows() != c || covariances.len() != c {
            return Err(Error::Input("mixture parameter counts disagree".into()));
        }
        let dim = means.ncols();
        if covariances.iter().any(|k| k.dim() != (dim, dim)) {
            return Err(Error::Input(format!("covariances must be {dim}x{dim}")));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Input("mixture weights must be non-negative and sum to 1".into()));
        }
        let factors = factorize(&covariances)?;
        Ok(GmmModel {
            weights,
            means,
            covariances,
            log_likelihood: Vec::new(),
            seed: 0,
            restart: 0,
            converged: false,
            pipeline_id: String::new(),
            factors,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// `log γᵢ(v) = log φᵢ + log N(v | μᵢ, Kᵢ)` for every row, `N × C`.
    pub fn log_gamma(&self, vs: ArrayView2<'_, f64>) -> Array2<f64> {
        let columns: Vec<Array1<f64>> = (0..self.n_components())
            .into_par_iter()
            .map(|k| {
                let f = &self.factors[k];
                let centered = &vs - &self.means.row(k);
                let y = centered.dot(&f.inv_chol.t());
                let log_w = self.weights[k].ln();
                y.rows()
                    .into_iter()
                    .map(|r| log_w + f.log_norm - 0.5 * r.dot(&r))
                    .collect()
            })
            .collect();
        let mut out = Array2::zeros((vs.nrows(), self.n_components()));
        for (k, col) in columns.into_iter().enumerate() {
            out.column_mut(k).assign(&col);
        }
        out
    }

    pub fn final_log_likelihood(&self) -> Option<f64> {
        self.log_likelihood.last().copied()
    }
}

fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

/// Normalized membership vector `d` (Eq. 4 in log space).
#[derive(Clone, Debug, PartialEq)]
pub struct Membership {
    pub d: Array1<f64>,
    /// Set when every `γᵢ` underflowed; `d` is then uniform.
    pub out_of_distribution: bool,
}

/// Normalizes log-responsibilities into a simplex vector.
pub fn membership_from_log(log_gamma: ArrayView1<'_, f64>) -> Membership {
    let c = log_gamma.len();
    let m = log_gamma.fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
    if !m.is_finite() || log_gamma.iter().any(|v| v.is_nan()) {
        return Membership {
            d: Array1::from_elem(c, 1.0 / c as f64),
            out_of_distribution: true,
        };
    }
    let mut d = log_gamma.mapv(|l| (l - m).exp());
    let s = d.sum();
    d /= s;
    Membership {
        d,
        out_of_distribution: false,
    }
}

pub fn membership(v: ArrayView1<'_, f64>, gmm: &GmmModel) -> Membership {
    let lg = gmm.log_gamma(v.insert_axis(Axis(0)));
    membership_from_log(lg.row(0))
}

pub fn memberships(vs: ArrayView2<'_, f64>, gmm: &GmmModel) -> Vec<Membership> {
    let lg = gmm.log_gamma(vs);
    lg.rows().into_iter().map(membership_from_log).collect()
}

/// Covariance of the rows of `x` around `mean` with weights `w` summing to `total`.
fn weighted_covariance(x: ArrayView2<'_, f64>, mean: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>, total: f64) -> Array2<f64> {
    let centered = &x - &mean;
    let weighted = &centered * &w.insert_axis(Axis(1));
    let mut cov = weighted.t().dot(&centered) / total;
    let sym = (&cov + &cov.t()) * 0.5;
    cov.assign(&sym);
    for i in 0..cov.nrows() {
        cov[[i, i]] += COV_REG;
    }
    cov
}

struct Params {
    weights: Array1<f64>,
    means: Array2<f64>,
    covariances: Vec<Array2<f64>>,
}

fn m_step(x: ArrayView2<'_, f64>, resp: &Array2<f64>, fallback: &Array2<f64>, min_count: f64) -> Params {
    let n = x.nrows() as f64;
    let nk = resp.sum_axis(Axis(0));
    let global_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut means = resp.t().dot(&x);
    for (k, mut row) in means.rows_mut().into_iter().enumerate() {
        if nk[k] > 0.0 {
            row /= nk[k];
        } else {
            row.assign(&global_mean);
        }
    }
    let covariances = (0..resp.ncols())
        .into_par_iter()
        .map(|k| {
            if nk[k] <= min_count {
                fallback.clone()
            } else {
                weighted_covariance(x, means.row(k), resp.column(k), nk[k])
            }
        })
        .collect();
    Params {
        weights: nk / n,
        means,
        covariances,
    }
}

fn e_step(x: ArrayView2<'_, f64>, p: &Params) -> Result<(f64, Array2<f64>)> {
    let model = GmmModel {
        weights: p.weights.clone(),
        means: p.means.clone(),
        covariances: Vec::new(),
        log_likelihood: Vec::new(),
        seed: 0,
        restart: 0,
        converged: false,
        pipeline_id: String::new(),
        factors: factorize(&p.covariances)?,
    };
    let mut lg = model.log_gamma(x);
    let mut ll = 0.0;
    for mut row in lg.rows_mut() {
        let lse = log_sum_exp(row.view());
        if !lse.is_finite() {
            return Err(Error::Numeric("a fitting point has zero likelihood under every component".into()));
        }
        ll += lse;
        row.mapv_inplace(|l| (l - lse).exp());
    }
    Ok((ll, lg))
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by nearest-center hard assignment.
fn kmeans_pp_assignment(x: ArrayView2<'_, f64>, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(centers[0]))).collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(pick);
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(pick)));
        }
    }
    let mut resp = Array2::zeros((n, c));
    for (i, r) in x.rows().into_iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (k, &ci) in centers.iter().enumerate() {
            let d = sq_dist(r, x.row(ci));
            if d < best.0 {
                best = (d, k);
            }
        }
        resp[[i, best.1]] = 1.0;
    }
    resp
}

struct Run {
    params: Params,
    trace: Vec<f64>,
    converged: bool,
}

fn run_em(x: ArrayView2<'_, f64>, c: usize, rng: &mut ChaCha8Rng) -> Result<Run> {
    let dim = x.ncols();
    let ones = Array1::from_elem(x.nrows(), 1.0);
    let global_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let global_cov = weighted_covariance(x, global_mean.view(), ones.view(), x.nrows() as f64);

    // Hard clusters too small to span the space start from the global covariance.
    let hard = kmeans_pp_assignment(x, c, rng);
    let mut params = m_step(x, &hard, &global_cov, dim as f64);

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for iter in 0..=MAX_ITER {
        let (ll, resp) = e_step(x, &params)?;
        if let Some(&prev) = trace.last() {
            if ll - prev < REL_TOL * ll.abs() {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iter == MAX_ITER {
            break;
        }
        params = m_step(x, &resp, &global_cov, 0.0);
    }
    Ok(Run {
        params,
        trace,
        converged,
    })
}

/// EM fit with k-means++ initialization, keeping the best of [`RESTARTS`] seeded runs.
pub fn gmm_fit(data: ArrayView2<'_, f64>, c: usize, seed: u64) -> Result<GmmModel> {
    let n = data.nrows();
    if c == 0 {
        return Err(Error::Param("the mixture needs at least one component".into()));
    }
    if c > n {
        return Err(Error::Param(format!("C = {c} exceeds the {n} fitting points")));
    }
    if data.ncols() == 0 || data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("fitting data must be finite and non-empty".into()));
    }
    let mut best: Option<(usize, Run)> = None;
    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let run = run_em(data, c, &mut rng)?;
        let ll = *run.trace.last().expect("at least one E-step");
        log::debug!("gmm restart {restart}: {} iterations, LL {ll}", run.trace.len());
        if best.as_ref().is_none_or(|(_, b)| ll > *b.trace.last().unwrap()) {
            best = Some((restart, run));
        }
    }
    let (restart, run) = best.expect("RESTARTS > 0");
    let mut model = GmmModel::from_parts(run.params.weights, run.params.means, run.params.covariances)?;
    model.log_likelihood = run.trace;
    model.seed = seed;
    model.restart = restart;
    model.converged = run.converged;
    Ok(model)
}
