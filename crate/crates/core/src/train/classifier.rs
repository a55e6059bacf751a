use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{epoch_order, EarlyStop, TrainConfig, TrainLog};
use crate::classify::{gap_regularizer, loss_with_gradients, predict_and_margin, LinearClassifier};
use crate::error::{invalid, mismatch, Error, Result};
use crate::GroupPartition;

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    /// Parameters from the epoch with the best validation accuracy.
    pub classifier: LinearClassifier,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

fn accuracy(clf: &LinearClassifier, features: &[DVector<f64>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (f, &l) in features.iter().zip(labels) {
        if predict_and_margin(clf, f)?.class == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

/// Minibatch SGD on precomputed (optionally pooled) codes. The gap term is
/// evaluated on the codes, which are fixed here, so it shifts the reported
/// loss but contributes no parameter gradient. It needs `partition`.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    features: &[DVector<f64>],
    labels: &[usize],
    val_features: &[DVector<f64>],
    val_labels: &[usize],
    n_classes: usize,
    partition: Option<&GroupPartition>,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if features.is_empty() || val_features.is_empty() {
        return Err(invalid("classifier training needs nonempty training and validation sets"));
    }
    if features.len() != labels.len() || val_features.len() != val_labels.len() {
        return Err(mismatch("features and labels differ in length"));
    }
    if n_classes < 2 {
        return Err(invalid("at least two classes are required"));
    }
    if let Some(&l) = labels.iter().chain(val_labels).find(|&&l| l >= n_classes) {
        return Err(invalid(format!("label {l} out of range for {n_classes} classes")));
    }
    let dim = features[0].len();
    if features.iter().chain(val_features).any(|f| f.len() != dim) {
        return Err(mismatch("feature vectors differ in length"));
    }
    if cfg.gap_weight > 0.0 && partition.is_none() {
        return Err(invalid("gap_weight > 0 needs the group partition of the codes"));
    }

    let rows = if n_classes == 2 { 1 } else { n_classes };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = LinearClassifier::new(
        DMatrix::from_fn(rows, dim, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal)),
        DVector::zeros(rows),
    )?;
    let mut vel_w = DMatrix::zeros(rows, dim);
    let mut vel_b = DVector::zeros(rows);
    let mut best = clf.clone();
    let mut best_epoch = 0;
    let mut best_class_loss = f64::INFINITY;
    let mut stop = EarlyStop::new(cfg.early_stop_patience, true);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs_max {
        let order = epoch_order(features.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut gap_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = DMatrix::zeros(rows, dim);
            let mut gb = DVector::zeros(rows);
            for &i in batch {
                let g = loss_with_gradients(&clf, &features[i], labels[i], cfg.loss)?;
                total += g.loss;
                gw += g.grad_weights;
                gb += g.grad_bias;
            }
            if cfg.gap_weight > 0.0 {
                let codes: Vec<DVector<f64>> = batch.iter().map(|&i| features[i].clone()).collect();
                let gap = gap_regularizer(&codes, partition.expect("checked above"), cfg.gap_threshold)?;
                gap_total += cfg.gap_weight * gap.value * batch.len() as f64;
            }
            let inv = 1.0 / batch.len() as f64;
            vel_w = vel_w * cfg.momentum - gw * (cfg.learning_rate * inv);
            vel_b = vel_b * cfg.momentum - gb * (cfg.learning_rate * inv);
            clf.weights += &vel_w;
            clf.bias += &vel_b;
        }
        let class_loss = total / features.len() as f64;
        let train_loss = class_loss + gap_total / features.len() as f64;
        if !train_loss.is_finite() || clf.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { epoch: epoch.saturating_sub(1), loss: train_loss });
        }
        let val_acc = accuracy(&clf, val_features, val_labels)?;
        log.push(epoch + 1, train_loss, val_acc);
        // Ties in validation accuracy go to the lower classification loss.
        let tie = stop.best() == Some(val_acc) && class_loss < best_class_loss;
        if stop.record(val_acc) || tie {
            best = clf.clone();
            best_epoch = epoch + 1;
            best_class_loss = class_loss;
        }
        if stop.should_stop() {
            break;
        }
    }
    Ok(TrainedClassifier {
        classifier: best,
        log,
        best_epoch,
        best_val_accuracy: stop.best().unwrap_or(0.0),
    })
}
