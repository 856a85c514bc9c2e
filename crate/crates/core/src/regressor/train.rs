//! Mini-batch SGD with classical momentum, weight decay and
//! reduce-on-plateau learning-rate decay.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward, loss_and_gradient, mean_squared_error, FaceRaster, Gradient, RegressorNet};
use crate::error::{Error, Result};
use crate::model::ExpressionCoeffs;
use crate::seed;

/// Validation loss must improve by more than this to reset the plateau counter.
pub const PLATEAU_MIN_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 144,
            plateau_patience: 5,
            plateau_factor: 0.1,
            min_lr: 1e-6,
            max_epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, n_train: usize) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.plateau_factor > 0.0
            && self.plateau_factor < 1.0
            && self.min_lr > 0.0
            && self.plateau_patience > 0
            && self.max_epochs > 0;
        if !ok {
            return Err(Error::validation(format!("invalid training configuration {self:?}")));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::validation(format!(
                "batch size {} must be between 1 and the training-set size {n_train}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean regularized mini-batch loss over the epoch.
    pub train_loss: f64,
    /// Mean squared error on the validation set after the epoch.
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn train(
    mut net: RegressorNet,
    train_set: &[(FaceRaster, ExpressionCoeffs)],
    val_set: &[(FaceRaster, ExpressionCoeffs)],
    config: &TrainConfig,
) -> Result<(RegressorNet, Vec<EpochRecord>)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::validation("training and validation sets must be non-empty"));
    }
    config.validate(train_set.len())?;

    let mut velocity = Gradient::zeros_like(&net);
    let mut rng = seed::derived_rng(config.seed, "train/shuffle", 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = config.learning_rate;
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&(FaceRaster, ExpressionCoeffs)> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grad) = loss_and_gradient(&net, &batch, config.weight_decay)?;
            loss_sum += loss;
            batches += 1;
            for ((layer, v), g) in net.layers.iter_mut().zip(velocity.layers.iter_mut()).zip(&grad.layers) {
                if let (Some(p), Some(v), Some(g)) = (layer.params_mut(), v.as_mut(), g.as_ref()) {
                    v.weights *= config.momentum;
                    v.weights -= &g.weights * lr;
                    v.bias *= config.momentum;
                    v.bias -= &g.bias * lr;
                    p.weights += &v.weights;
                    p.bias += &v.bias;
                }
            }
        }
        let val_loss = mean_squared_error(&net, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Solver(format!("training diverged at epoch {epoch}")));
        }
        history.push(EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_loss, lr });
        log::debug!("epoch {epoch}: train {:.6} val {val_loss:.6} lr {lr:e}", loss_sum / batches as f64);

        if val_loss < best_val - PLATEAU_MIN_DELTA {
            best_val = val_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= config.plateau_patience {
            if lr <= config.min_lr {
                break;
            }
            lr = (lr * config.plateau_factor).max(config.min_lr);
            stale = 0;
        }
    }
    Ok((net, history))
}

/// Forward pass over many inputs; returns predictions and per-item seconds.
pub fn predict_dataset(net: &RegressorNet, frames: &[FaceRaster]) -> Result<(Vec<ExpressionCoeffs>, Vec<f64>)> {
    let out: Result<Vec<(ExpressionCoeffs, f64)>> = frames
        .par_iter()
        .map(|x| {
            let start = Instant::now();
            let y = forward(net, x)?;
            Ok((y, start.elapsed().as_secs_f64()))
        })
        .collect();
    Ok(out?.into_iter().unzip())
}
