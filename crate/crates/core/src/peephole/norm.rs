use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Standard deviations below this are replaced by 1 and flagged.
pub const MIN_STD: f64 = 1e-12;

/// Per-coordinate standardization of core vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    /// Coordinates whose spread was below [`MIN_STD`].
    pub degenerate: Vec<usize>,
    pub pipeline_id: String,
}

/// Population mean and standard deviation of the rows of `vs`.
pub fn fit_norm(vs: ArrayView2<'_, f64>) -> Result<NormStats> {
    let n = vs.nrows();
    if n < 2 {
        return Err(Error::Input(format!("normalization needs at least 2 vectors, got {n}")));
    }
    let mean = vs.mean_axis(Axis(0)).expect("non-empty");
    let var = (&vs - &mean).mapv(|d| d * d).sum_axis(Axis(0)) / n as f64;
    let mut degenerate = Vec::new();
    let std = Array1::from_iter(var.iter().enumerate().map(|(i, v)| {
        let s = v.sqrt();
        if s < MIN_STD {
            degenerate.push(i);
            1.0
        } else {
            s
        }
    }));
    Ok(NormStats {
        mean,
        std,
        degenerate,
        pipeline_id: String::new(),
    })
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        (&v - &self.mean) / &self.std
    }

    pub fn normalize_rows(&self, vs: ArrayView2<'_, f64>) -> Array2<f64> {
        (&vs - &self.mean) / &self.std
    }

    pub fn denormalize(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        &v * &self.std + &self.mean
    }
}
