use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AutoencoderModel, Network};
use crate::error::{Error, Result};
use crate::telemetry::Dataset;

/// Mini-batch Adam settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Validation chunks used to monitor the loss each epoch (all when `None`).
    pub val_monitor: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 100,
            patience: 10,
            seed: 0,
            val_monitor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    fn new(net: &Network<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = net.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, net: &mut Network<f32>, grad: &Network<f32>, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = cfg.learning_rate as f32 * c2.sqrt() / c1;
        let eps = cfg.epsilon as f32 * c2.sqrt();
        for (((p, g), m), v) in net
            .param_slices_mut()
            .into_iter()
            .zip(grad.param_slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

fn mean_loss(net: &Network<f32>, inputs: &Array2<f32>) -> f64 {
    if inputs.nrows() == 0 {
        return f64::NAN;
    }
    let mut total = 0.0f64;
    for batch in inputs.axis_chunks_iter(Axis(0), 256) {
        let recon = net.reconstruct(batch);
        total += (&recon - &batch).iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>();
    }
    total / inputs.len() as f64
}

/// Minimizes the mean squared reconstruction error with mini-batch Adam,
/// keeping the parameters of the best validation epoch.
///
/// Deterministic for a given seed: batches are drawn from a per-epoch
/// ChaCha stream and all arithmetic is single-threaded.
pub fn train(model: &mut AutoencoderModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if !train.is_nominal() || !val.is_nominal() {
        return Err(Error::Input("training and validation data must be nominal".into()));
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training needs non-empty train and validation splits".into()));
    }
    let train_x = model.prepare(train.chunks()).mapv(|v| v as f32);
    let monitor = cfg.val_monitor.unwrap_or(val.len()).clamp(1, val.len());
    let val_x = model.prepare(&val.chunks()[..monitor]).mapv(|v| v as f32);

    let mut net = model.network.clone();
    let mut grad = net.zeros_like();
    let mut adam = Adam::new(&net);
    let mut order: Vec<usize> = (0..train_x.nrows()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network<f32>)> = None;
    let mut stale = 0;
    let width = train_x.ncols();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Array2::<f32>::zeros((idx.len(), width));
            for (mut row, &i) in batch.rows_mut().into_iter().zip(idx) {
                row.assign(&train_x.row(i));
            }
            let loss = net.loss_and_grad(batch.view(), &mut grad);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: loss as f64,
                });
            }
            total += loss as f64 * idx.len() as f64;
            adam.update(&mut net, &grad, cfg);
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(&net, &val_x);
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                loss: val_loss,
            });
        }
        log::info!("epoch {epoch}: train loss {train_loss:.6e}, val loss {val_loss:.6e}");
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_val, best_epoch, best_net) = best.expect("at least one epoch ran");
    model.set_network(best_net);
    model.meta.seed = cfg.seed;
    model.meta.epochs_run = history.len();
    model.meta.best_epoch = Some(best_epoch);
    model.meta.best_val_loss = Some(best_val);
    model.meta.final_train_loss = history.last().map(|h| h.train_loss);
    Ok(history)
}
