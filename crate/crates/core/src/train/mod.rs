//! Dictionary pretraining, classifier fitting and feedforward approximators.

mod classifier;
mod dictionary;
mod network;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classify::LossKind;
use crate::error::{invalid, mismatch, Error, Result};

pub use classifier::{train_classifier, TrainedClassifier};
pub use dictionary::{
    pretrain_dictionary, pretrain_dictionary_from, reconstruction_loss, PretrainedDictionary,
};
pub use network::{
    fit, load_model, save_model, train_feedforward_approximator, ApproximatorClassifier, Architecture, BatchGradients,
    BatchStats, FeedforwardModel, Layer, Objective, Preset, TrainedModel, ATTENTION_FEATURE_MAP, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub early_stop_patience: usize,
    /// Epochs over which the regularization weights ramp up to their final
    /// values during dictionary pretraining.
    pub gamma_warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum for the SGD updates; 0 gives plain SGD.
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Weight of the gap regularizer; 0 disables it.
    pub gap_weight: f64,
    pub gap_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 500,
            early_stop_patience: 10,
            gamma_warmup_epochs: 4,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.0,
            seed: 0,
            loss: LossKind::CrossEntropy,
            gap_weight: 0.0,
            gap_threshold: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.early_stop_patience == 0 {
            return Err(invalid("early_stop_patience must be at least 1"));
        }
        if self.gamma_warmup_epochs > self.epochs_max {
            return Err(invalid(format!(
                "gamma_warmup_epochs ({}) exceeds epochs_max ({})",
                self.gamma_warmup_epochs, self.epochs_max
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.gap_weight >= 0.0 && self.gap_weight.is_finite()) {
            return Err(invalid(format!("gap_weight must be nonnegative, got {}", self.gap_weight)));
        }
        Ok(())
    }
}

/// Fraction of the final regularization weights used in training epoch
/// `epoch` (counted from 0).
pub fn gamma_schedule(epoch: usize, warmup_epochs: usize) -> f64 {
    if epoch >= warmup_epochs {
        1.0
    } else {
        (epoch + 1) as f64 / warmup_epochs as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Per-epoch training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_metric";

    pub fn push(&mut self, epoch: usize, train_loss: f64, val_metric: f64) {
        self.rows.push(LogRow { epoch, train_loss, val_metric });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{:?},{:?}", r.epoch, r.train_loss, r.val_metric);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Sample order for one epoch, fixed by `(seed, epoch)`.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Tracks the best validation value and the epochs since it last improved.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStop {
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStop {
    pub(crate) fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStop { patience, higher_is_better, best: None, stale: 0 }
    }

    /// Records a validation value; true when it is a new best.
    pub(crate) fn record(&mut self, value: f64) -> bool {
        let better = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        };
        if better {
            self.best = Some(value);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        better
    }

    pub(crate) fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub(crate) fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Group-activity scores of predicted pooled norms against the true active
/// groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    /// Fraction of groups predicted inactive.
    pub inactive_rate: f64,
    /// Fraction of groups whose predicted activity matches the truth.
    pub mean_group_accuracy: f64,
    /// Fraction of samples whose predicted active set is exactly right.
    pub exact_combination_rate: f64,
    pub samples: usize,
}

/// A group is predicted active when its pooled norm exceeds `threshold`.
pub fn group_statistics(pooled: &[DVector<f64>], truth: &[Vec<bool>], threshold: f64) -> Result<GroupStats> {
    if pooled.len() != truth.len() {
        return Err(mismatch(format!("{} predictions but {} ground-truth masks", pooled.len(), truth.len())));
    }
    if pooled.is_empty() {
        return Err(invalid("group statistics need at least one sample"));
    }
    let (mut inactive, mut correct, mut exact, mut total) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in pooled.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(mismatch(format!("{} pooled norms but {} groups in the mask", p.len(), t.len())));
        }
        let mut all = true;
        for (&norm, &active) in p.iter().zip(t) {
            let predicted = norm > threshold;
            inactive += usize::from(!predicted);
            if predicted == active {
                correct += 1;
            } else {
                all = false;
            }
        }
        exact += usize::from(all);
        total += t.len();
    }
    Ok(GroupStats {
        inactive_rate: inactive as f64 / total as f64,
        mean_group_accuracy: correct as f64 / total as f64,
        exact_combination_rate: exact as f64 / pooled.len() as f64,
        samples: pooled.len(),
    })
}
