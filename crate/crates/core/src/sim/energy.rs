//! Declarative per-component energy accounting.
//!
//! Costs are joules per invocation unit; reports multiply unit costs by the
//! invocation counters of a [`MetricsLog`], so component totals and the
//! grand total are exactly additive. Defaults describe an embedded-class
//! device at its unconstrained power mode, with the compound costs
//! (validation round, fine-tune round) decomposed into per-image and
//! per-iteration constants that reproduce the round totals.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsLog;
use super::SimError;

/// Images per reference validation round used to decompose the round cost.
pub const REF_VALIDATION_IMAGES: f64 = 30.0;
/// Reference validation round energy, joules.
pub const REF_VALIDATION_ROUND_J: f64 = 15.1;
/// Iterations (epochs x batches) per reference fine-tune round:
/// 182.3 s per round / 1.98 s per iteration, rounded.
pub const REF_FINE_TUNE_ITERATIONS: f64 = 92.0;
/// Reference fine-tune round energy, joules.
pub const REF_FINE_TUNE_ROUND_J: f64 = 2789.2;

/// Joules per invocation of each pipeline component, plus idle draw.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyCostTable {
    /// One class-distribution test (window completion).
    pub cdd_j: f64,
    /// One LSDD permutation test.
    pub bdd_j: f64,
    /// One stream-image inference.
    pub inference_j: f64,
    /// One synthesized validation image (synthesis + inference).
    pub validation_per_image_j: f64,
    /// One training iteration: one batch within one epoch.
    pub fine_tune_per_epoch_per_batch_j: f64,
    /// Baseline draw while powered on.
    pub idle_watts: f64,
    /// Simulated wall time of one training iteration.
    pub fine_tune_seconds_per_iteration: f64,
}

impl Default for EnergyCostTable {
    fn default() -> Self {
        Self {
            cdd_j: 0.0215,
            bdd_j: 0.5486,
            inference_j: 0.4966,
            validation_per_image_j: REF_VALIDATION_ROUND_J / REF_VALIDATION_IMAGES,
            fine_tune_per_epoch_per_batch_j: REF_FINE_TUNE_ROUND_J / REF_FINE_TUNE_ITERATIONS,
            idle_watts: 0.0034,
            fine_tune_seconds_per_iteration: 1.98,
        }
    }
}

impl EnergyCostTable {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| SimError::Config(e.to_string()))
    }

    /// Cost of one validation round at the reference set size.
    pub fn reference_validation_round_j(&self) -> f64 {
        self.validation_per_image_j * REF_VALIDATION_IMAGES
    }

    /// Cost of one fine-tune round at the reference iteration count.
    pub fn reference_fine_tune_round_j(&self) -> f64 {
        self.fine_tune_per_epoch_per_batch_j * REF_FINE_TUNE_ITERATIONS
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyRow {
    pub component: String,
    pub count: u64,
    pub joules: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub active_joules: f64,
    pub idle_joules: f64,
    pub total_joules: f64,
    pub total_watt_hours: f64,
}

/// Per-component totals and the grand total (active + idle). The grand total
/// is computed as the exact sum of the rows plus idle.
pub fn energy_report(log: &MetricsLog, costs: &EnergyCostTable) -> EnergyReport {
    let e = &log.energy;
    let rows = vec![
        EnergyRow {
            component: "cdd".into(),
            count: e.cdd_tests,
            joules: e.cdd_tests as f64 * costs.cdd_j,
        },
        EnergyRow {
            component: "bdd".into(),
            count: e.bdd_tests,
            joules: e.bdd_tests as f64 * costs.bdd_j,
        },
        EnergyRow {
            component: "inference".into(),
            count: e.inferences,
            joules: e.inferences as f64 * costs.inference_j,
        },
        EnergyRow {
            component: "validation".into(),
            count: e.validation_images,
            joules: e.validation_images as f64 * costs.validation_per_image_j,
        },
        EnergyRow {
            component: "fine_tune".into(),
            count: e.fine_tune_iterations,
            joules: e.fine_tune_iterations as f64 * costs.fine_tune_per_epoch_per_batch_j,
        },
    ];
    let active_joules: f64 = rows.iter().map(|r| r.joules).sum();
    let idle_joules = costs.idle_watts * log.sim_duration_s;
    let total_joules = active_joules + idle_joules;
    EnergyReport {
        rows,
        active_joules,
        idle_joules,
        total_joules,
        total_watt_hours: total_joules / 3600.0,
    }
}

/// `component,count,joules` table including idle and the grand total.
pub fn write_energy_csv(
    log: &MetricsLog,
    costs: &EnergyCostTable,
    path: &Path,
) -> Result<(), SimError> {
    let report = energy_report(log, costs);
    let mut text = String::from("component,count,joules\n");
    for row in &report.rows {
        text.push_str(&format!("{},{},{}\n", row.component, row.count, row.joules));
    }
    text.push_str(&format!("idle,,{}\n", report.idle_joules));
    text.push_str(&format!("total,,{}\n", report.total_joules));
    fs::write(path, text).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })
}
