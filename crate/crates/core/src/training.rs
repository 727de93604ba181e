//! Mini-batch maximum-likelihood training with teacher forcing.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{IkError, Result};
use crate::exec::derive_seed;
use crate::model::{IkModel, Preset};
use crate::numerics::{Adam, AdamConfig, Mode, Tensor};

/// Training poses used to recompute batch-norm statistics after each epoch.
pub const RECALIBRATION_POSES: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Epochs without validation improvement before the learning rate is
    /// halved.
    pub patience: usize,
    /// Stop once the learning rate falls below this.
    pub min_lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
    pub preset: Preset,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            val_fraction: 0.05,
            patience: 25,
            min_lr: 1e-6,
            lr_decay: 0.98,
            clip_norm: Some(10.0),
            preset: Preset::Desk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(IkError::Config("batch size must be >= 2 (batch norm)".into()));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(IkError::Config("validation fraction must be in [0, 0.5)".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(IkError::Config("learning-rate decay must be in (0, 1]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(IkError::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best validation loss seen (epoch 0 = the input model).
    pub model: IkModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Epoch at which a non-finite loss or gradient stopped training.
    pub diverged_at: Option<usize>,
}

/// Trains (or fine-tunes, when `model` is already trained) on `dataset`.
pub fn train(model: IkModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.joints != model.joints() {
        return Err(IkError::Config(format!(
            "dataset has {} joints but the model expects {}",
            dataset.joints,
            model.joints()
        )));
    }
    let (train_set, val_set) = dataset.split(cfg.val_fraction, derive_seed(cfg.seed, 2));
    if train_set.len() < 2 {
        return Err(IkError::Config("training split needs at least 2 samples".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let score = |m: &IkModel, set: &Dataset| m.nll_loss(&set.poses, &set.angles, Mode::Infer);
    let selection_set = if val_set.is_empty() { &train_set } else { &val_set };
    let calibration = &train_set.poses[..train_set.len().min(RECALIBRATION_POSES)];

    let mut model = model;
    let initial_val = score(&model, selection_set).unwrap_or(f64::INFINITY);
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_nll: f64::NAN,
        val_nll: initial_val,
        lr: cfg.lr,
    }];
    let mut best = model.clone();
    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut since_improvement = 0;
    let mut diverged_at = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let poses: Vec<_> = chunk.iter().map(|&i| train_set.poses[i]).collect();
            let angles: Vec<_> = chunk.iter().map(|&i| train_set.angles[i].clone()).collect();
            let step = model.loss_and_grads(&poses, &angles).and_then(|(loss, mut grads, stats)| {
                if let Some(max) = cfg.clip_norm {
                    clip_global_norm(&mut grads, max);
                }
                opt.step(&mut model.params_mut(), &grads)?;
                model.apply_batch_stats(&stats, chunk.len());
                Ok(loss)
            });
            match step {
                Ok(loss) if loss.is_finite() => {
                    loss_sum += loss;
                    batches += 1;
                }
                Ok(_) | Err(IkError::NonFiniteLoss { .. }) | Err(IkError::NonFiniteGradient(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_nll = loss_sum / batches.max(1) as f64;
        model.recalibrate_norms(calibration)?;
        let val = match score(&model, selection_set) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(IkError::NonFiniteLoss { .. }) => {
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            train_nll,
            val_nll: val,
            lr: opt.config.lr,
        });
        log::info!("epoch {epoch}: train {train_nll:.4} val {val:.4} lr {:.2e}", opt.config.lr);
        if cfg.lr_decay < 1.0 {
            opt.set_lr(opt.config.lr * cfg.lr_decay);
        }
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.clone();
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                let lr = opt.config.lr * 0.5;
                opt.set_lr(lr);
                since_improvement = 0;
                if lr < cfg.min_lr {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val,
        diverged_at,
    })
}

fn clip_global_norm(grads: &mut [Tensor], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Loss history as `epoch,train_nll,val_nll`.
pub fn write_history<W: Write>(history: &[EpochRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_nll", "val_nll"])?;
    for r in history {
        out.write_record([
            r.epoch.to_string(),
            r.train_nll.to_string(),
            r.val_nll.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    write_history(history, std::fs::File::create(path)?)
}
