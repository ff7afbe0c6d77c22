//! Append-only replay metrics: predictions, detector activity, validations,
//! fine-tunes, energy counters, and derived accuracy series.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ClassId;
use crate::drift::DriftKind;

use super::SimError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub timestamp: f64,
    pub hidden_label: ClassId,
    pub prediction: ClassId,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BddRecord {
    pub timestamp: f64,
    pub bg_id: u64,
    /// `None` when no LSDD test ran (bootstrap fill / reservoir policy).
    pub p_value: Option<f64>,
    pub added: bool,
    pub evicted: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CddRecord {
    pub timestamp: f64,
    /// `None` on an empty-dominated reset.
    pub p_value: Option<f64>,
    pub triggered: bool,
    pub reset: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub timestamp: f64,
    pub kind: DriftKind,
    pub measured_accuracy: f64,
    pub fine_tune_needed: bool,
    pub images_inferred: usize,
    pub images_reused: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneReason {
    /// Initial round once the repository fills.
    Bootstrap,
    BackgroundDrift,
    ClassDrift,
    Schedule,
    /// Direct CDD trigger without a validation gate.
    CddDirect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub timestamp: f64,
    pub reason: FineTuneReason,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub samples: usize,
    /// Simulated wall time of the round.
    pub duration_s: f64,
}

/// Training sample captured by the pseudolabel/gtlabel baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectedSampleRecord {
    pub timestamp: f64,
    pub event_index: usize,
    pub label_used: ClassId,
    /// The model's prediction for the image at collection time.
    pub prediction_at_collection: ClassId,
}

/// Invocation counts per charged component. Energy in joules is derived as
/// `count * unit cost`, never accumulated, so reports are exactly additive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyCounters {
    pub cdd_tests: u64,
    pub bdd_tests: u64,
    pub inferences: u64,
    pub validation_images: u64,
    pub fine_tune_iterations: u64,
}

/// Full replay ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLog {
    pub mode: String,
    pub pipeline_seed: u64,
    pub predictions: Vec<PredictionRecord>,
    pub bdd: Vec<BddRecord>,
    pub cdd: Vec<CddRecord>,
    pub validations: Vec<ValidationRecord>,
    pub fine_tunes: Vec<FineTuneRecord>,
    pub collected: Vec<CollectedSampleRecord>,
    pub energy: EnergyCounters,
    /// Simulated wall time covered by the stream.
    pub sim_duration_s: f64,
    pub label_reads_evaluator: u64,
    pub label_reads_training: u64,
}

impl MetricsLog {
    pub fn new(mode: String, pipeline_seed: u64) -> Self {
        Self {
            mode,
            pipeline_seed,
            predictions: Vec::new(),
            bdd: Vec::new(),
            cdd: Vec::new(),
            validations: Vec::new(),
            fine_tunes: Vec::new(),
            collected: Vec::new(),
            energy: EnergyCounters::default(),
            sim_duration_s: 0.0,
            label_reads_evaluator: 0,
            label_reads_training: 0,
        }
    }

    /// Accuracy over every animal prediction.
    pub fn overall_accuracy(&self) -> Option<f64> {
        if self.predictions.is_empty() {
            return None;
        }
        let ok = self.predictions.iter().filter(|p| p.correct).count();
        Some(ok as f64 / self.predictions.len() as f64)
    }

    /// Accuracy over predictions after the bootstrap fine-tune (all modes
    /// adapt from the same point); falls back to overall accuracy when no
    /// fine-tune ever ran.
    pub fn post_bootstrap_accuracy(&self) -> Option<f64> {
        let start = match self.fine_tunes.first() {
            Some(ft) => ft.timestamp,
            None => return self.overall_accuracy(),
        };
        let late: Vec<&PredictionRecord> = self
            .predictions
            .iter()
            .filter(|p| p.timestamp > start)
            .collect();
        if late.is_empty() {
            return self.overall_accuracy();
        }
        Some(late.iter().filter(|p| p.correct).count() as f64 / late.len() as f64)
    }

    /// Fine-tune rounds excluding the shared bootstrap round.
    pub fn adaptive_fine_tune_count(&self) -> usize {
        self.fine_tunes
            .iter()
            .filter(|f| f.reason != FineTuneReason::Bootstrap)
            .count()
    }

    /// Timestamps are non-decreasing within every record stream.
    pub fn timestamps_monotone(&self) -> bool {
        fn mono(ts: impl Iterator<Item = f64>) -> bool {
            let mut prev = f64::NEG_INFINITY;
            for t in ts {
                if t < prev {
                    return false;
                }
                prev = t;
            }
            true
        }
        mono(self.predictions.iter().map(|r| r.timestamp))
            && mono(self.bdd.iter().map(|r| r.timestamp))
            && mono(self.cdd.iter().map(|r| r.timestamp))
            && mono(self.validations.iter().map(|r| r.timestamp))
            && mono(self.fine_tunes.iter().map(|r| r.timestamp))
    }

    /// Sliding accuracy over animal events: entry `i >= window-1` covers
    /// predictions `i-window+1 ..= i`, tagged with the window-end timestamp.
    pub fn sliding_window_accuracy(&self, window: usize) -> Vec<(f64, f64)> {
        sliding_window_accuracy(&self.predictions, window)
    }

    pub fn final_window_accuracy(&self, window: usize) -> Option<f64> {
        self.sliding_window_accuracy(window).last().map(|(_, a)| *a)
    }

    /// One JSON object per line: every record stream, tagged by type.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), SimError> {
        let mut out = fs::File::create(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut emit = |value: serde_json::Value| -> Result<(), SimError> {
            writeln!(out, "{value}").map_err(|source| SimError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        for r in &self.predictions {
            emit(serde_json::json!({"type": "prediction", "record": r}))?;
        }
        for r in &self.bdd {
            emit(serde_json::json!({"type": "bdd", "record": r}))?;
        }
        for r in &self.cdd {
            emit(serde_json::json!({"type": "cdd", "record": r}))?;
        }
        for r in &self.validations {
            emit(serde_json::json!({"type": "validation", "record": r}))?;
        }
        for r in &self.fine_tunes {
            emit(serde_json::json!({"type": "fine_tune", "record": r}))?;
        }
        for r in &self.collected {
            emit(serde_json::json!({"type": "collected", "record": r}))?;
        }
        emit(serde_json::json!({
            "type": "summary",
            "mode": self.mode,
            "pipeline_seed": self.pipeline_seed,
            "energy": self.energy,
            "sim_duration_s": self.sim_duration_s,
            "label_reads_evaluator": self.label_reads_evaluator,
            "label_reads_training": self.label_reads_training,
        }))
    }

    /// `index,timestamp,accuracy` series of the sliding window.
    pub fn write_sliding_csv(&self, path: &Path, window: usize) -> Result<(), SimError> {
        let mut text = String::from("index,timestamp,accuracy\n");
        for (i, (ts, acc)) in self.sliding_window_accuracy(window).iter().enumerate() {
            text.push_str(&format!("{i},{ts},{acc}\n"));
        }
        fs::write(path, text).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Standalone sliding-window accuracy over prediction records.
pub fn sliding_window_accuracy(
    predictions: &[PredictionRecord],
    window: usize,
) -> Vec<(f64, f64)> {
    let window = window.max(1);
    if predictions.len() < window {
        return Vec::new();
    }
    // Prefix sums of correct counts.
    let mut prefix = Vec::with_capacity(predictions.len() + 1);
    prefix.push(0u64);
    for p in predictions {
        prefix.push(prefix.last().unwrap() + u64::from(p.correct));
    }
    (window - 1..predictions.len())
        .map(|i| {
            let correct = prefix[i + 1] - prefix[i + 1 - window];
            (predictions[i].timestamp, correct as f64 / window as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(pattern: &[bool]) -> Vec<PredictionRecord> {
        pattern
            .iter()
            .enumerate()
            .map(|(i, ok)| PredictionRecord {
                timestamp: i as f64,
                hidden_label: 1,
                prediction: if *ok { 1 } else { 2 },
                correct: *ok,
            })
            .collect()
    }

    #[test]
    fn all_correct_is_constant_one() {
        let series = sliding_window_accuracy(&preds(&[true; 10]), 4);
        assert_eq!(series.len(), 7);
        assert!(series.iter().all(|(_, a)| *a == 1.0));
    }

    #[test]
    fn alternating_with_window_two_is_half() {
        let pattern: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let series = sliding_window_accuracy(&preds(&pattern), 2);
        assert!(series.iter().all(|(_, a)| *a == 0.5));
    }

    #[test]
    fn fewer_events_than_window_is_empty() {
        assert!(sliding_window_accuracy(&preds(&[true, false]), 5).is_empty());
    }

    #[test]
    fn matches_naive_recomputation() {
        // Independent oracle: recompute each window by direct summation.
        let pattern: Vec<bool> = (0..57).map(|i| (i * 7) % 3 != 1).collect();
        let records = preds(&pattern);
        let window = 9;
        let fast = sliding_window_accuracy(&records, window);
        for (k, (ts, acc)) in fast.iter().enumerate() {
            let i = k + window - 1;
            let naive = records[i + 1 - window..=i]
                .iter()
                .filter(|p| p.correct)
                .count() as f64
                / window as f64;
            assert_eq!(*acc, naive);
            assert_eq!(*ts, records[i].timestamp);
        }
    }
}
