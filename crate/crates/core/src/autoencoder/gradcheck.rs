//! Finite-difference verification of backpropagated gradients.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Network;
use crate::error::{Error, Result};

/// A scalar loss over grouped parameters with an analytic gradient.
pub trait Differentiable {
    fn n_groups(&self) -> usize;
    fn group_name(&self, group: usize) -> String;
    fn group_len(&self, group: usize) -> usize;
    fn param(&self, group: usize, index: usize) -> f64;
    fn set_param(&mut self, group: usize, index: usize, value: f64);
    fn loss(&self, input: ArrayView2<'_, f64>) -> f64;
    fn gradient(&self, input: ArrayView2<'_, f64>) -> Vec<Vec<f64>>;
    /// Sign pattern of piecewise-linear units; empty for smooth models.
    fn kink_pattern(&self, _input: ArrayView2<'_, f64>) -> Vec<bool> {
        Vec::new()
    }
}

impl Differentiable for Network<f64> {
    fn n_groups(&self) -> usize {
        2 * self.layers.len()
    }

    fn group_name(&self, group: usize) -> String {
        let what = if group % 2 == 0 { "weight" } else { "bias" };
        format!("layer{}.{what}", group / 2)
    }

    fn group_len(&self, group: usize) -> usize {
        let l = &self.layers[group / 2];
        if group % 2 == 0 {
            l.weight.len()
        } else {
            l.bias.len()
        }
    }

    fn param(&self, group: usize, index: usize) -> f64 {
        self.param_slices()[group][index]
    }

    fn set_param(&mut self, group: usize, index: usize, value: f64) {
        self.param_slices_mut()[group][index] = value;
    }

    fn loss(&self, input: ArrayView2<'_, f64>) -> f64 {
        let recon = self.reconstruct(input);
        (&recon - &input).mapv(|d| d * d).sum() / input.len() as f64
    }

    fn gradient(&self, input: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
        let mut grad = self.zeros_like();
        self.loss_and_grad(input, &mut grad);
        grad.param_slices().iter().map(|s| s.to_vec()).collect()
    }

    fn kink_pattern(&self, input: ArrayView2<'_, f64>) -> Vec<bool> {
        self.activation_pattern(input)
    }
}

/// Single affine layer `y = W x + b` with squared error against a fixed target.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub target: Array1<f64>,
}

impl LinearProbe {
    fn output(&self, input: ArrayView2<'_, f64>) -> Array1<f64> {
        let x = input.row(0);
        self.weight.dot(&x) + &self.bias
    }
}

impl Differentiable for LinearProbe {
    fn n_groups(&self) -> usize {
        2
    }

    fn group_name(&self, group: usize) -> String {
        ["weight", "bias"][group].to_string()
    }

    fn group_len(&self, group: usize) -> usize {
        [self.weight.len(), self.bias.len()][group]
    }

    fn param(&self, group: usize, index: usize) -> f64 {
        match group {
            0 => self.weight.as_slice().unwrap()[index],
            _ => self.bias[index],
        }
    }

    fn set_param(&mut self, group: usize, index: usize, value: f64) {
        match group {
            0 => self.weight.as_slice_mut().unwrap()[index] = value,
            _ => self.bias[index] = value,
        }
    }

    fn loss(&self, input: ArrayView2<'_, f64>) -> f64 {
        let r = self.output(input) - &self.target;
        r.dot(&r) / r.len() as f64
    }

    fn gradient(&self, input: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
        let r = (self.output(input) - &self.target) * (2.0 / self.target.len() as f64);
        let x = input.row(0);
        let dw = Array2::from_shape_fn(self.weight.dim(), |(i, j)| r[i] * x[j]);
        vec![dw.into_raw_vec_and_offset().0, r.to_vec()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// Max over checked coordinates of `|g_bp - g_fd| / max(|g_bp|, |g_fd|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates rejected because the perturbation crossed a rectifier kink.
    pub skipped_kinks: usize,
    pub per_group: Vec<(String, f64)>,
}

/// Compares backprop against central differences on up to `per_group`
/// randomly chosen coordinates of every parameter group.
pub fn gradient_check<M: Differentiable>(
    model: &mut M,
    input: ArrayView2<'_, f64>,
    eps: f64,
    per_group: usize,
    seed: u64,
) -> Result<GradientCheck> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Param(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    let analytic = model.gradient(input);
    let base_pattern = model.kink_pattern(input);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradientCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        per_group: Vec::new(),
    };
    for g in 0..model.n_groups() {
        let mut candidates: Vec<usize> = (0..model.group_len(g)).collect();
        candidates.shuffle(&mut rng);
        let mut group_max = 0.0f64;
        let mut accepted = 0;
        for &i in &candidates {
            if accepted == per_group {
                break;
            }
            let original = model.param(g, i);
            model.set_param(g, i, original + eps);
            let plus = model.loss(input);
            let kink_plus = !base_pattern.is_empty() && model.kink_pattern(input) != base_pattern;
            model.set_param(g, i, original - eps);
            let minus = model.loss(input);
            let kink_minus = !base_pattern.is_empty() && model.kink_pattern(input) != base_pattern;
            model.set_param(g, i, original);
            if kink_plus || kink_minus {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * eps);
            let bp = analytic[g][i];
            let err = (bp - fd).abs() / bp.abs().max(fd.abs()).max(1e-8);
            group_max = group_max.max(err);
            accepted += 1;
        }
        report.checked += accepted;
        report.max_rel_error = report.max_rel_error.max(group_max);
        report.per_group.push((model.group_name(g), group_max));
    }
    Ok(report)
}
