//! Layer kernels over batched activations.
//!
//! Spatial activations are `[channels, batch·256]` matrices, column index
//! `b·256 + row·16 + col`. Flat activations are `[batch, features]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::Real;
use crate::telemetry::{N_CHANNELS, WINDOW};

pub(crate) const SIDE: usize = WINDOW;
pub(crate) const PLANE: usize = WINDOW * N_CHANNELS;
pub(crate) const TAPS: usize = 9;
pub(crate) const LEAK: f64 = 0.01;

/// 3×3 patches with zero padding: `[c, N]` → `[c·9, N]`.
pub(crate) fn im2col<T: Real>(x: ArrayView2<'_, T>) -> Array2<T> {
    let (channels, n) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((channels * TAPS, n));
    let dst = cols.as_slice_mut().expect("fresh array");
    let batch = n / PLANE;
    for c in 0..channels {
        let plane = &src[c * n..(c + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut dst[(c * TAPS + ky * 3 + kx) * n..][..n];
                let (w0, w1) = (1usize.saturating_sub(kx), (SIDE + 1 - kx).min(SIDE));
                for b in 0..batch {
                    for h in 0..SIDE {
                        let hs = h as isize + ky as isize - 1;
                        if !(0..SIDE as isize).contains(&hs) {
                            continue;
                        }
                        let d = b * PLANE + h * SIDE;
                        let s = b * PLANE + hs as usize * SIDE;
                        row[d + w0..d + w1].copy_from_slice(&plane[s + w0 + kx - 1..s + w1 + kx - 1]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `[c·9, N]` patch rows back onto `[c, N]`.
pub(crate) fn col2im<T: Real>(cols: ArrayView2<'_, T>, channels: usize) -> Array2<T> {
    let n = cols.ncols();
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array2::<T>::zeros((channels, n));
    let dst = out.as_slice_mut().expect("fresh array");
    let batch = n / PLANE;
    for c in 0..channels {
        let plane = &mut dst[c * n..(c + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(c * TAPS + ky * 3 + kx) * n..][..n];
                let (w0, w1) = (1usize.saturating_sub(kx), (SIDE + 1 - kx).min(SIDE));
                for b in 0..batch {
                    for h in 0..SIDE {
                        let hs = h as isize + ky as isize - 1;
                        if !(0..SIDE as isize).contains(&hs) {
                            continue;
                        }
                        let d = b * PLANE + h * SIDE;
                        let s = b * PLANE + hs as usize * SIDE;
                        for (o, &v) in plane[s + w0 + kx - 1..s + w1 + kx - 1]
                            .iter_mut()
                            .zip(&row[d + w0..d + w1])
                        {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[c, B·256]` → `[B, c·256]`.
pub(crate) fn spatial_to_flat<T: Real>(x: ArrayView2<'_, T>) -> Array2<T> {
    let (channels, n) = x.dim();
    let batch = n / PLANE;
    let mut out = Array2::<T>::zeros((batch, channels * PLANE));
    for b in 0..batch {
        for c in 0..channels {
            out.slice_mut(ndarray::s![b, c * PLANE..(c + 1) * PLANE])
                .assign(&x.slice(ndarray::s![c, b * PLANE..(b + 1) * PLANE]));
        }
    }
    out
}

/// `[B, c·256]` → `[c, B·256]`.
pub(crate) fn flat_to_spatial<T: Real>(x: ArrayView2<'_, T>, channels: usize) -> Array2<T> {
    let batch = x.nrows();
    let mut out = Array2::<T>::zeros((channels, batch * PLANE));
    for b in 0..batch {
        for c in 0..channels {
            out.slice_mut(ndarray::s![c, b * PLANE..(b + 1) * PLANE])
                .assign(&x.slice(ndarray::s![b, c * PLANE..(c + 1) * PLANE]));
        }
    }
    out
}

pub(crate) fn leaky<T: Real>(x: &mut Array2<T>) {
    let leak = T::from(LEAK).unwrap();
    x.mapv_inplace(|v| if v > T::zero() { v } else { v * leak });
}

/// Multiplies `grad` by the leaky-rectifier derivative, read off the layer output.
pub(crate) fn leaky_backward<T: Real>(grad: &mut Array2<T>, output: &Array2<T>) {
    let leak = T::from(LEAK).unwrap();
    ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
        if y <= T::zero() {
            *g = *g * leak;
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 same-padded convolution, weight `[out, in·9]`.
    Conv,
    /// 3×3 same-padded transposed convolution, weight `[in, out·9]`.
    ConvTranspose,
    /// Affine map, weight `[out, in]`.
    Dense,
}

/// One parametric layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    /// Leaky rectifier on the output.
    pub activation: bool,
}

/// What a layer keeps from its forward pass for the backward pass.
pub(crate) enum Saved<T> {
    Cols(Array2<T>),
    Input(Array2<T>),
}

impl<T: Real> Layer<T> {
    pub fn zeros(kind: LayerKind, in_dim: usize, out_dim: usize, activation: bool) -> Self {
        let shape = match kind {
            LayerKind::Conv => (out_dim, in_dim * TAPS),
            LayerKind::ConvTranspose => (in_dim, out_dim * TAPS),
            LayerKind::Dense => (out_dim, in_dim),
        };
        Layer {
            kind,
            in_dim,
            out_dim,
            weight: Array2::zeros(shape),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    /// Fan-in used for initialization scaling.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv | LayerKind::ConvTranspose => self.in_dim * TAPS,
            LayerKind::Dense => self.in_dim,
        }
    }

    pub fn is_spatial(&self) -> bool {
        self.kind != LayerKind::Dense
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            kind: self.kind,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self.weight.mapv(|v| U::from(v).unwrap()),
            bias: self.bias.mapv(|v| U::from(v).unwrap()),
            activation: self.activation,
        }
    }

    /// Pre-activation output plus whatever the backward pass needs.
    pub(crate) fn forward_pre(&self, x: ArrayView2<'_, T>, keep: bool) -> (Array2<T>, Option<Saved<T>>) {
        match self.kind {
            LayerKind::Conv => {
                let cols = im2col(x);
                let mut out = Array2::<T>::zeros((self.out_dim, x.ncols()));
                general_mat_mul(T::one(), &self.weight, &cols, T::zero(), &mut out);
                out += &self.bias.view().insert_axis(Axis(1));
                (out, keep.then_some(Saved::Cols(cols)))
            }
            LayerKind::ConvTranspose => {
                let mut cols = Array2::<T>::zeros((self.out_dim * TAPS, x.ncols()));
                general_mat_mul(T::one(), &self.weight.t(), &x, T::zero(), &mut cols);
                let mut out = col2im(cols.view(), self.out_dim);
                out += &self.bias.view().insert_axis(Axis(1));
                (out, keep.then(|| Saved::Input(x.to_owned())))
            }
            LayerKind::Dense => {
                let mut out = Array2::<T>::zeros((x.nrows(), self.out_dim));
                general_mat_mul(T::one(), &x, &self.weight.t(), T::zero(), &mut out);
                out += &self.bias.view().insert_axis(Axis(0));
                (out, keep.then(|| Saved::Input(x.to_owned())))
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient when asked.
    pub(crate) fn backward(
        &self,
        dout: &Array2<T>,
        saved: &Saved<T>,
        grad: &mut Layer<T>,
        need_input_grad: bool,
    ) -> Option<Array2<T>> {
        match (self.kind, saved) {
            (LayerKind::Conv, Saved::Cols(cols)) => {
                general_mat_mul(T::one(), dout, &cols.t(), T::one(), &mut grad.weight);
                grad.bias += &dout.sum_axis(Axis(1));
                need_input_grad.then(|| {
                    let mut dcols = Array2::<T>::zeros(cols.dim());
                    general_mat_mul(T::one(), &self.weight.t(), dout, T::zero(), &mut dcols);
                    col2im(dcols.view(), self.in_dim)
                })
            }
            (LayerKind::ConvTranspose, Saved::Input(x)) => {
                let dcols = im2col(dout.view());
                general_mat_mul(T::one(), x, &dcols.t(), T::one(), &mut grad.weight);
                grad.bias += &dout.sum_axis(Axis(1));
                need_input_grad.then(|| {
                    let mut dx = Array2::<T>::zeros(x.dim());
                    general_mat_mul(T::one(), &self.weight, &dcols, T::zero(), &mut dx);
                    dx
                })
            }
            (LayerKind::Dense, Saved::Input(x)) => {
                general_mat_mul(T::one(), &dout.t(), x, T::one(), &mut grad.weight);
                grad.bias += &dout.sum_axis(Axis(0));
                need_input_grad.then(|| {
                    let mut dx = Array2::<T>::zeros(x.dim());
                    general_mat_mul(T::one(), dout, &self.weight, T::zero(), &mut dx);
                    dx
                })
            }
            _ => unreachable!("saved state does not match layer kind"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 3×3 convolution with zero padding, used as an oracle for im2col + GEMM.
    fn naive_conv(x: &Array2<f64>, w: &Array2<f64>, cin: usize, cout: usize) -> Array2<f64> {
        let n = x.ncols();
        let mut out = Array2::zeros((cout, n));
        for o in 0..cout {
            for p in 0..n {
                let (b, h, wc) = (p / PLANE, (p % PLANE) / SIDE, p % SIDE);
                let mut acc = 0.0;
                for c in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (hs, ws) = (h as isize + ky as isize - 1, wc as isize + kx as isize - 1);
                            if (0..16).contains(&hs) && (0..16).contains(&ws) {
                                acc += w[[o, c * 9 + ky * 3 + kx]]
                                    * x[[c, b * PLANE + hs as usize * SIDE + ws as usize]];
                            }
                        }
                    }
                }
                out[[o, p]] = acc;
            }
        }
        out
    }

    fn pseudo(shape: (usize, usize), salt: f64) -> Array2<f64> {
        Array2::from_shape_fn(shape, |(i, j)| ((i * 31 + j * 17) as f64 * 0.37 + salt).sin())
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let x = pseudo((3, 2 * PLANE), 0.1);
        let mut layer = Layer::<f64>::zeros(LayerKind::Conv, 3, 4, false);
        layer.weight = pseudo((4, 27), 0.7);
        let (out, _) = layer.forward_pre(x.view(), false);
        let oracle = naive_conv(&x, &layer.weight, 3, 4);
        assert!((&out - &oracle).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = pseudo((2, 2 * PLANE), 0.3);
        let y = pseudo((18, 2 * PLANE), 1.9);
        let lhs = (&im2col(x.view()) * &y).sum();
        let rhs = (&x * &col2im(y.view(), 2)).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn layout_round_trip() {
        let x = pseudo((5, 3 * PLANE), 0.0);
        let flat = spatial_to_flat(x.view());
        assert_eq!(flat.dim(), (3, 5 * PLANE));
        assert_eq!(flat_to_spatial(flat.view(), 5), x);
    }
}
