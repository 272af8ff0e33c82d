use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{flat_to_spatial, leaky, leaky_backward, spatial_to_flat, Layer, LayerKind, Saved, PLANE};
use super::{ArchitectureDescriptor, Real};

/// The convolutional autoencoder as an ordered list of parametric layers:
/// conv blocks, the latent dense layer, the decoder dense layer, and mirrored
/// transposed-conv blocks ending in a single-channel linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
    /// Index of the dense layer producing the latent vector.
    pub latent: usize,
}

/// Everything a backward pass needs from a batched forward pass.
pub(crate) struct Trace<T> {
    saved: Vec<Saved<T>>,
    outputs: Vec<Array2<T>>,
}

/// Per-sample views of a forward pass.
pub struct ForwardBatch<T> {
    /// `[B, 256]` reconstructions, row-major 16×16 per sample.
    pub reconstruction: Array2<T>,
    /// `[B, latent_dim]`.
    pub latent: Array2<T>,
    /// `[B, flatten_dim]` activations entering the latent dense layer.
    pub latent_input: Array2<T>,
}

impl<T: Real> Network<T> {
    pub fn zeros(arch: &ArchitectureDescriptor) -> Self {
        let mut layers = Vec::new();
        let mut prev = 1;
        for &f in &arch.filters {
            layers.push(Layer::zeros(LayerKind::Conv, prev, f, true));
            prev = f;
        }
        let flat = prev * PLANE;
        let latent = layers.len();
        layers.push(Layer::zeros(LayerKind::Dense, flat, arch.latent_dim, false));
        layers.push(Layer::zeros(LayerKind::Dense, arch.latent_dim, flat, true));
        let mut widths: Vec<usize> = arch.filters.iter().rev().copied().collect();
        widths.push(1);
        let n_decoder = widths.len() - 1;
        for (k, pair) in widths.windows(2).enumerate() {
            layers.push(Layer::zeros(LayerKind::ConvTranspose, pair[0], pair[1], k + 1 < n_decoder));
        }
        Network { layers, latent }
    }

    /// He-normal weights, zero biases, deterministic in `seed`.
    pub fn init(arch: &ArchitectureDescriptor, seed: u64) -> Self {
        let mut net = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let gain = if layer.activation { 2.0 } else { 1.0 };
            let std = (gain / layer.fan_in() as f64).sqrt();
            layer.weight.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from(z * std).unwrap()
            });
        }
        net
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(Layer::cast).collect(),
            latent: self.latent,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.kind, l.in_dim, l.out_dim, l.activation))
                .collect(),
            latent: self.latent,
        }
    }

    /// Flat parameter slices: weight then bias for each layer.
    pub fn param_slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Runs a batch `[B, 256]` through the network.
    pub(crate) fn run(&self, input: ArrayView2<'_, T>, keep: bool) -> (Array2<T>, Trace<T>, Array2<T>, Array2<T>) {
        let batch = input.nrows();
        let mut x = flat_to_spatial(input, 1);
        let mut spatial = true;
        let mut trace = Trace {
            saved: Vec::new(),
            outputs: Vec::new(),
        };
        let mut latent = Array2::zeros((0, 0));
        let mut latent_input = Array2::zeros((0, 0));
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.is_spatial() && !spatial {
                x = flat_to_spatial(x.view(), layer.in_dim);
                spatial = true;
            } else if !layer.is_spatial() && spatial {
                x = spatial_to_flat(x.view());
                spatial = false;
            }
            if i == self.latent {
                latent_input = x.clone();
            }
            let (mut out, saved) = layer.forward_pre(x.view(), keep);
            if layer.activation {
                leaky(&mut out);
            }
            if i == self.latent {
                latent = out.clone();
            }
            if let Some(s) = saved {
                trace.saved.push(s);
                trace.outputs.push(out.clone());
            }
            x = out;
        }
        debug_assert!(spatial && x.nrows() == 1 && x.ncols() == batch * PLANE);
        let recon = spatial_to_flat(x.view());
        (recon, trace, latent, latent_input)
    }

    pub fn forward_batch(&self, input: ArrayView2<'_, T>) -> ForwardBatch<T> {
        let (reconstruction, _, latent, latent_input) = self.run(input, false);
        ForwardBatch {
            reconstruction,
            latent,
            latent_input,
        }
    }

    pub fn reconstruct(&self, input: ArrayView2<'_, T>) -> Array2<T> {
        self.run(input, false).0
    }

    /// Mean over the batch of per-sample mean squared reconstruction error,
    /// with its gradient accumulated into `grad` (which is zeroed first).
    pub fn loss_and_grad(&self, input: ArrayView2<'_, T>, grad: &mut Network<T>) -> T {
        let (recon, trace, _, _) = self.run(input, true);
        let n = T::from(input.len()).unwrap();
        let diff = &recon - &input;
        let loss = diff.iter().fold(T::zero(), |acc, &d| acc + d * d) / n;
        for l in &mut grad.layers {
            l.weight.fill(T::zero());
            l.bias.fill(T::zero());
        }
        let two = T::from(2.0).unwrap();
        let mut d = flat_to_spatial(diff.mapv(|v| two * v / n).view(), 1);
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if layer.activation {
                leaky_backward(&mut d, &trace.outputs[i]);
            }
            let need = i > 0;
            let dx = layer.backward(&d, &trace.saved[i], &mut grad.layers[i], need);
            let Some(dx) = dx else { break };
            d = dx;
            // convert gradient layout to what the previous layer produced
            let prev = &self.layers[i - 1];
            if prev.is_spatial() && !layer.is_spatial() {
                d = flat_to_spatial(d.view(), prev.out_dim);
            } else if !prev.is_spatial() && layer.is_spatial() {
                d = spatial_to_flat(d.view());
            }
        }
        loss
    }

    /// Sign pattern of every rectified unit, for detecting kinks during finite differencing.
    pub(crate) fn activation_pattern(&self, input: ArrayView2<'_, T>) -> Vec<bool> {
        let (_, trace, _, _) = self.run(input, true);
        trace
            .outputs
            .iter()
            .zip(&self.layers)
            .filter(|(_, l)| l.activation)
            .flat_map(|(o, _)| o.iter().map(|&v| v > T::zero()).collect::<Vec<_>>())
            .collect()
    }

    /// `(W, b)` of the latent dense layer.
    pub fn latent_layer(&self) -> (&Array2<T>, &Array1<T>) {
        let l = &self.layers[self.latent];
        (&l.weight, &l.bias)
    }
}
