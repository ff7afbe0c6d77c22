//! Mini-batch SGD for the classification head.
//!
//! Cross-entropy over softmax logits; only parameters allowed by the head's
//! trainable mask move. Normalization statistics update as running averages
//! during training and are frozen for inference (and treated as constants by
//! the gradients, so finite differences on a fixed batch reproduce them).

use image::RgbImage;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{predict_proba, Head, Model, ModelError, Result, TrainConfig, TrainableMask, NORM_EPS};
use crate::corpus::ClassId;

/// Momentum of the running-statistics update.
const STATS_MOMENTUM: f64 = 0.1;

/// Full-size gradients of the head loss; the trainable mask is applied at
/// update time, not here.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Negative log of one probability. Exact zeros are clamped (they appear at
/// extreme but legitimate logit gaps); NaN from diverged parameters
/// propagates so the trainer can abort.
#[inline]
fn nll(p: f64) -> f64 {
    if p.is_nan() {
        f64::NAN
    } else {
        -p.max(1e-300).ln()
    }
}

/// Mean cross-entropy of a batch under the current head parameters, with the
/// normalization statistics held fixed.
pub fn head_loss(head: &Head, features: &[Vec<f64>], labels: &[ClassId]) -> Result<f64> {
    let mut loss = 0.0;
    for (f, y) in features.iter().zip(labels) {
        let p = predict_proba(head, f)?;
        loss += nll(p[*y]);
    }
    Ok(loss / features.len() as f64)
}

/// Batch loss and analytic gradients for every head parameter.
pub fn head_loss_and_grads(
    head: &Head,
    features: &[Vec<f64>],
    labels: &[ClassId],
) -> Result<(f64, HeadGrads)> {
    let d = head.feature_dim;
    let c = head.num_classes;
    let n = features.len() as f64;
    let mut grads = HeadGrads {
        w: vec![0.0; c * d],
        b: vec![0.0; c],
        gamma: vec![0.0; d],
        beta: vec![0.0; d],
    };
    let mut loss = 0.0;

    for (f, y) in features.iter().zip(labels) {
        if *y >= c {
            return Err(ModelError::InvalidLabel(*y, c));
        }
        let p = predict_proba(head, f)?;
        loss += nll(p[*y]);

        // zhat: normalized feature before the affine; a: the linear input.
        let mut zhat = vec![0.0; d];
        let mut a = vec![0.0; d];
        for j in 0..d {
            zhat[j] = (f[j] - head.running_mean[j]) / (head.running_var[j] + NORM_EPS).sqrt();
            a[j] = zhat[j] * head.gamma[j] + head.beta[j];
        }

        // dL/dlogit = softmax - onehot (per-sample, averaged later).
        let mut dlogits = p;
        dlogits[*y] -= 1.0;

        let mut da = vec![0.0; d];
        for (ci, dl) in dlogits.iter().enumerate() {
            grads.b[ci] += dl;
            let row = ci * d;
            for j in 0..d {
                grads.w[row + j] += dl * a[j];
                da[j] += dl * head.w[row + j];
            }
        }
        for j in 0..d {
            grads.gamma[j] += da[j] * zhat[j];
            grads.beta[j] += da[j];
        }
    }

    for g in grads
        .w
        .iter_mut()
        .chain(&mut grads.b)
        .chain(&mut grads.gamma)
        .chain(&mut grads.beta)
    {
        *g /= n;
    }
    Ok((loss / n, grads))
}

fn apply_update(head: &mut Head, grads: &HeadGrads, lr: f64) {
    for (w, g) in head.w.iter_mut().zip(&grads.w) {
        *w -= lr * g;
    }
    if matches!(
        head.mask,
        TrainableMask::LinearBias | TrainableMask::LinearBiasNorm
    ) {
        for (b, g) in head.b.iter_mut().zip(&grads.b) {
            *b -= lr * g;
        }
    }
    if head.mask == TrainableMask::LinearBiasNorm {
        for (gm, g) in head.gamma.iter_mut().zip(&grads.gamma) {
            *gm -= lr * g;
        }
        for (bt, g) in head.beta.iter_mut().zip(&grads.beta) {
            *bt -= lr * g;
        }
    }
}

fn batch_mean_var(features: &[Vec<f64>], idx: &[usize], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = idx.len() as f64;
    let mut mean = vec![0.0; dim];
    for i in idx {
        for (m, v) in mean.iter_mut().zip(&features[*i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for i in idx {
        for j in 0..dim {
            let d = features[*i][j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Update running statistics from one batch. The first batch initializes
/// them outright; later batches blend in with fixed momentum. Statistics
/// only move while the normalization parameters are trainable.
fn update_stats(head: &mut Head, features: &[Vec<f64>], idx: &[usize]) {
    let (mean, var) = batch_mean_var(features, idx, head.feature_dim);
    if !head.stats_initialized {
        head.running_mean = mean;
        head.running_var = var;
        head.stats_initialized = true;
    } else {
        for j in 0..head.feature_dim {
            head.running_mean[j] =
                (1.0 - STATS_MOMENTUM) * head.running_mean[j] + STATS_MOMENTUM * mean[j];
            head.running_var[j] =
                (1.0 - STATS_MOMENTUM) * head.running_var[j] + STATS_MOMENTUM * var[j];
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Loss on the held-out split (train loss when the split is empty).
    pub val_loss: f64,
    pub lr: f64,
}

/// Stratified split: roughly `frac` of each class goes to validation.
/// Classes with a single sample stay in training.
fn stratified_split(
    labels: &[ClassId],
    num_classes: usize,
    frac: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, y) in labels.iter().enumerate() {
        groups[*y].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut group in groups {
        group.shuffle(rng);
        let n_val = if group.len() >= 2 && frac > 0.0 {
            ((group.len() as f64 * frac).round() as usize).clamp(1, group.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&group[..n_val]);
        train.extend_from_slice(&group[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Train the head with mini-batch SGD and cross-entropy.
///
/// The learning rate drops once from `lr_init` to `lr_reduced` after
/// `scheduler_patience` epochs without validation improvement; training
/// stops after `early_stop_patience` such epochs. Returns the per-epoch
/// history (empty when `max_epochs` is 0, leaving the head untouched).
pub fn train_head(
    head: &mut Head,
    features: &[Vec<f64>],
    labels: &[ClassId],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if features.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if features.len() != labels.len() {
        return Err(ModelError::DimensionMismatch(features.len(), labels.len()));
    }
    for f in features {
        if f.len() != head.feature_dim {
            return Err(ModelError::DimensionMismatch(f.len(), head.feature_dim));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeatures);
        }
    }
    for y in labels {
        if *y >= head.num_classes {
            return Err(ModelError::InvalidLabel(*y, head.num_classes));
        }
    }
    if cfg.max_epochs == 0 {
        return Ok(Vec::new());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, val_idx) =
        stratified_split(labels, head.num_classes, cfg.val_split, &mut rng);
    if train_idx.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }

    let gather = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<ClassId>) {
        (
            idx.iter().map(|i| features[*i].clone()).collect(),
            idx.iter().map(|i| labels[*i]).collect(),
        )
    };
    let (val_f, val_y) = gather(&val_idx);

    let batch_size = cfg.batch_size.max(1);
    let mut lr = cfg.lr_init;
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut reduced = false;
    let mut history = Vec::new();

    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in train_idx.chunks(batch_size).enumerate() {
            update_stats(head, features, chunk);
            let (bf, by) = gather(chunk);
            let (loss, grads) = head_loss_and_grads(head, &bf, &by)?;
            if !loss.is_finite() {
                return Err(ModelError::NanLoss {
                    epoch,
                    batch: bi,
                    lr,
                });
            }
            apply_update(head, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = if val_f.is_empty() {
            train_loss
        } else {
            head_loss(head, &val_f, &val_y)?
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
        });

        if val_loss < best_val {
            best_val = val_loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if !reduced && bad_epochs >= cfg.scheduler_patience {
                lr = cfg.lr_reduced;
                reduced = true;
            }
            if bad_epochs >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(history)
}

/// Result of one fine-tune round.
#[derive(Debug, Clone)]
pub struct FineTuneReport {
    pub epochs_run: usize,
    pub batches_per_epoch: usize,
    pub samples: usize,
    pub history: Vec<EpochStats>,
}

/// Fine-tune the model head on labeled images: featurize everything once
/// (the backbone is frozen, so features are computed exactly once per
/// image), then run [`train_head`]. Only head parameters change.
pub fn fine_tune(
    model: &mut Model,
    samples: &[(&RgbImage, ClassId)],
    cfg: &TrainConfig,
) -> Result<FineTuneReport> {
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let images: Vec<&RgbImage> = samples.iter().map(|(img, _)| *img).collect();
    let labels: Vec<ClassId> = samples.iter().map(|(_, y)| *y).collect();
    let features = model.featurizer.featurize_batch(&images)?;
    let history = train_head(&mut model.head, &features, &labels, cfg)?;

    let val_count = ((samples.len() as f64) * cfg.val_split).round() as usize;
    let train_count = samples.len().saturating_sub(val_count).max(1);
    Ok(FineTuneReport {
        epochs_run: history.len(),
        batches_per_epoch: train_count.div_ceil(cfg.batch_size.max(1)),
        samples: samples.len(),
        history,
    })
}
