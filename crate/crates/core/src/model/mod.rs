//! The classifier: a frozen, seeded random-filter featurizer and a trainable
//! head (per-feature affine normalization + linear layer + bias).
//!
//! The featurizer stands in for a frozen convolutional backbone: fixed 5x5x3
//! kernels, ReLU on both response signs, global average pooling. Only the
//! head ever trains, and its trainable surface is selected by
//! [`TrainableMask`].

mod train;

pub use train::{
    fine_tune, head_loss, head_loss_and_grads, train_head, EpochStats, FineTuneReport, HeadGrads,
};

use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ClassId;
use crate::rng::derive_rng;

/// Epsilon inside the normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image {0}x{1} smaller than kernel size {2}")]
    ImageTooSmall(u32, u32, usize),
    #[error("non-finite features")]
    NonFiniteFeatures,
    #[error("feature dimension {0} does not match head dimension {1}")]
    DimensionMismatch(usize, usize),
    #[error("label {0} out of range (num_classes = {1})")]
    InvalidLabel(ClassId, usize),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (lr = {lr})")]
    NanLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("checkpoint featurizer hash mismatch: stored {stored}, rebuilt {rebuilt}")]
    CheckpointMismatch { stored: String, rebuilt: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Construction parameters of the frozen featurizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerSpec {
    pub seed: u64,
    pub num_kernels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl Default for FeaturizerSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_kernels: 32,
            kernel_size: 5,
            stride: 2,
        }
    }
}

/// Frozen featurizer: fixed random convolution kernels, ReLU of both response
/// signs, global average pooling. Output dimension is `2 * num_kernels`.
#[derive(Debug, Clone)]
pub struct Featurizer {
    spec: FeaturizerSpec,
    /// Kernel weights, position-major: `kernels[pos * num_kernels + k]` with
    /// `pos = (ky * ks + kx) * 3 + channel`. This layout keeps the inner
    /// per-position loop over kernels contiguous.
    kernels: Vec<f32>,
}

impl Featurizer {
    pub fn new(spec: FeaturizerSpec) -> Self {
        let mut rng = derive_rng(spec.seed, 0xFEA7);
        let positions = spec.kernel_size * spec.kernel_size * 3;
        let mut kernels = vec![0.0f32; positions * spec.num_kernels];
        // Kernel-major generation so each kernel is a contiguous seeded draw,
        // then store position-major.
        for k in 0..spec.num_kernels {
            for p in 0..positions {
                let v: f64 = rng.random_range(-1.0..=1.0);
                kernels[p * spec.num_kernels + k] = v as f32;
            }
        }
        Self { spec, kernels }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(FeaturizerSpec {
            seed,
            ..FeaturizerSpec::default()
        })
    }

    pub fn spec(&self) -> &FeaturizerSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        2 * self.spec.num_kernels
    }

    /// FNV-1a over the kernel bit patterns; checkpoint integrity check.
    pub fn filter_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.kernels {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Convolve every kernel over the image (valid padding, fixed stride),
    /// apply ReLU to both response signs, and global-average-pool each map.
    pub fn featurize(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let ks = self.spec.kernel_size;
        let (w, h) = img.dimensions();
        if (w as usize) < ks || (h as usize) < ks {
            return Err(ModelError::ImageTooSmall(w, h, ks));
        }
        let nk = self.spec.num_kernels;
        let stride = self.spec.stride.max(1);
        let out_w = (w as usize - ks) / stride + 1;
        let out_h = (h as usize - ks) / stride + 1;

        let raw = img.as_raw();
        let row_bytes = w as usize * 3;
        let mut pos_acc = vec![0.0f32; 2 * nk];
        let mut patch = vec![0.0f32; ks * ks * 3];
        let mut resp = vec![0.0f32; nk];

        for oy in 0..out_h {
            for ox in 0..out_w {
                let x0 = ox * stride;
                let y0 = oy * stride;
                // Gather the patch once.
                let mut pi = 0;
                for ky in 0..ks {
                    let row = (y0 + ky) * row_bytes + x0 * 3;
                    for b in &raw[row..row + ks * 3] {
                        patch[pi] = *b as f32 / 255.0;
                        pi += 1;
                    }
                }
                // Accumulate all kernel responses for this position.
                resp.iter_mut().for_each(|r| *r = 0.0);
                for (p, pv) in patch.iter().enumerate() {
                    let krow = &self.kernels[p * nk..(p + 1) * nk];
                    for (k, kv) in krow.iter().enumerate() {
                        resp[k] += pv * kv;
                    }
                }
                for (k, r) in resp.iter().enumerate() {
                    if *r > 0.0 {
                        pos_acc[2 * k] += r;
                    } else {
                        pos_acc[2 * k + 1] -= r;
                    }
                }
            }
        }

        let denom = (out_w * out_h) as f64;
        Ok(pos_acc.iter().map(|v| *v as f64 / denom).collect())
    }

    /// Featurize a batch in parallel; output order matches input order.
    pub fn featurize_batch(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        images.par_iter().map(|img| self.featurize(img)).collect()
    }
}

/// Which head parameters training may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableMask {
    /// Linear weights only.
    LinearOnly,
    /// Linear weights and biases.
    LinearBias,
    /// Linear weights, biases, and normalization affine parameters.
    LinearBiasNorm,
}

/// Trainable classification head: per-feature affine normalization followed
/// by a linear layer with bias and softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Row-major `num_classes x feature_dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub mask: TrainableMask,
    pub stats_initialized: bool,
}

impl Head {
    pub fn new(num_classes: usize, feature_dim: usize, mask: TrainableMask) -> Self {
        Self {
            gamma: vec![1.0; feature_dim],
            beta: vec![0.0; feature_dim],
            running_mean: vec![0.0; feature_dim],
            running_var: vec![1.0; feature_dim],
            w: vec![0.0; num_classes * feature_dim],
            b: vec![0.0; num_classes],
            num_classes,
            feature_dim,
            mask,
            stats_initialized: false,
        }
    }

    /// Normalized, affine-transformed features (the linear layer's input).
    pub fn normalize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .enumerate()
            .map(|(d, f)| {
                let zhat = (f - self.running_mean[d]) / (self.running_var[d] + NORM_EPS).sqrt();
                zhat * self.gamma[d] + self.beta[d]
            })
            .collect()
    }
}

/// Class probabilities for one feature vector (softmax over the head's
/// logits). Probabilities are finite, non-negative, and sum to 1.
pub fn predict_proba(head: &Head, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != head.feature_dim {
        return Err(ModelError::DimensionMismatch(
            features.len(),
            head.feature_dim,
        ));
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(ModelError::NonFiniteFeatures);
    }
    let z = head.normalize(features);
    let mut logits = head.b.clone();
    for c in 0..head.num_classes {
        let row = &head.w[c * head.feature_dim..(c + 1) * head.feature_dim];
        logits[c] += row.iter().zip(&z).map(|(w, z)| w * z).sum::<f64>();
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter_mut().for_each(|e| *e /= sum);
    Ok(exps)
}

/// Argmax class of [`predict_proba`].
pub fn predict_class(head: &Head, features: &[f64]) -> Result<ClassId> {
    let proba = predict_proba(head, features)?;
    Ok(proba
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(c, _)| c)
        .unwrap_or(0))
}

/// Hyperparameters of the head trainer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_reduced: f64,
    /// Epochs without validation improvement before the lr drops.
    pub scheduler_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stratified fraction held out for early stopping.
    pub val_split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_reduced: 1e-5,
            scheduler_patience: 2,
            early_stop_patience: 4,
            batch_size: 32,
            max_epochs: 30,
            seed: 0,
            val_split: 0.1,
        }
    }
}

/// Frozen featurizer plus trainable head.
#[derive(Debug, Clone)]
pub struct Model {
    pub featurizer: Featurizer,
    pub head: Head,
}

impl Model {
    pub fn new(featurizer: Featurizer, num_classes: usize, mask: TrainableMask) -> Self {
        let dim = featurizer.output_dim();
        Self {
            featurizer,
            head: Head::new(num_classes, dim, mask),
        }
    }

    /// Featurize and classify one image.
    pub fn classify(&self, img: &RgbImage) -> Result<(ClassId, Vec<f64>)> {
        let features = self.featurizer.featurize(img)?;
        let proba = predict_proba(&self.head, &features)?;
        let class = proba
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(c, _)| c)
            .unwrap_or(0);
        Ok((class, proba))
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            featurizer: CheckpointFeaturizer {
                spec: *self.featurizer.spec(),
                filter_hash: format!("{:016x}", self.featurizer.filter_hash()),
            },
            head: self.head.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.checkpoint())?;
        let mut f = std::fs::File::create(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(json.as_bytes())
            .map_err(|source| ModelError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck: ModelCheckpoint = serde_json::from_str(&text)?;
        ck.into_model()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFeaturizer {
    pub spec: FeaturizerSpec,
    pub filter_hash: String,
}

/// Self-describing model checkpoint: the featurizer is stored as seed + spec
/// + hash and rebuilt on load; loading fails if the rebuilt filter bank does
/// not match the stored hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub featurizer: CheckpointFeaturizer,
    pub head: Head,
}

impl ModelCheckpoint {
    pub fn into_model(self) -> Result<Model> {
        let featurizer = Featurizer::new(self.featurizer.spec);
        let rebuilt = format!("{:016x}", featurizer.filter_hash());
        if rebuilt != self.featurizer.filter_hash {
            return Err(ModelError::CheckpointMismatch {
                stored: self.featurizer.filter_hash,
                rebuilt,
            });
        }
        Ok(Model {
            featurizer,
            head: self.head,
        })
    }
}
