//! Frontier sweep: replay the scenario once per knob setting of each mode
//! and tabulate (fine-tune count, mean accuracy) rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Scenario;

use super::replay::replay;
use super::{EnergyCostTable, Mode, PipelineConfig, SimResult};

/// Knob grids of the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepKnobs {
    /// Validation thresholds for the gated pipeline.
    pub thresholds: Vec<f64>,
    /// Intervals (days) for the periodic baselines.
    pub periodic_days: Vec<f64>,
    /// Significance levels for the direct CDD trigger.
    pub cdd_alphas: Vec<f64>,
}

impl Default for SweepKnobs {
    fn default() -> Self {
        Self {
            thresholds: (0..=6).map(|i| i as f64 / 100.0).collect(),
            periodic_days: vec![2.0, 4.0, 6.0, 8.0, 10.0, 14.0, 21.0],
            cdd_alphas: vec![0.005, 0.01, 0.02, 0.03, 0.04, 0.05],
        }
    }
}

/// One frontier point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierRow {
    /// Mode family ("wildfit_all", "periodic", "periodic_bdd",
    /// "triggered_cdd").
    pub mode: String,
    /// The knob value that produced the row (threshold, days, or alpha).
    pub knob: f64,
    /// Fine-tune rounds beyond the shared bootstrap round.
    pub fine_tune_count: usize,
    /// Accuracy over animal events after the bootstrap round.
    pub mean_accuracy: f64,
}

/// Run one replay per knob setting (in parallel; row order is fixed by the
/// knob grids) and tabulate the accuracy/fine-tune frontier.
pub fn pareto_sweep(
    scenario: &Scenario,
    base: &PipelineConfig,
    knobs: &SweepKnobs,
    costs: &EnergyCostTable,
) -> SimResult<Vec<FrontierRow>> {
    let mut runs: Vec<(String, f64, PipelineConfig)> = Vec::new();
    for thr in &knobs.thresholds {
        let mut cfg = base.clone();
        cfg.mode = Mode::WildfitAll;
        cfg.validation.thr = *thr;
        runs.push(("wildfit_all".into(), *thr, cfg));
    }
    for days in &knobs.periodic_days {
        let mut cfg = base.clone();
        cfg.mode = Mode::Periodic { days: *days };
        runs.push(("periodic".into(), *days, cfg));
        let mut cfg = base.clone();
        cfg.mode = Mode::PeriodicBdd { days: *days };
        runs.push(("periodic_bdd".into(), *days, cfg));
    }
    for alpha in &knobs.cdd_alphas {
        let mut cfg = base.clone();
        cfg.mode = Mode::TriggeredCdd { alpha: *alpha };
        runs.push(("triggered_cdd".into(), *alpha, cfg));
    }

    runs.into_par_iter()
        .map(|(mode, knob, cfg)| {
            let log = replay(scenario, &cfg, costs)?;
            Ok(FrontierRow {
                mode,
                knob,
                fine_tune_count: log.adaptive_fine_tune_count(),
                mean_accuracy: log.post_bootstrap_accuracy().unwrap_or(0.0),
            })
        })
        .collect()
}

/// `mode,knob,fine_tune_count,mean_accuracy` table.
pub fn write_frontier_csv(rows: &[FrontierRow], path: &std::path::Path) -> SimResult<()> {
    let mut text = String::from("mode,knob,fine_tune_count,mean_accuracy\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.mode, r.knob, r.fine_tune_count, r.mean_accuracy
        ));
    }
    std::fs::write(path, text).map_err(|source| super::SimError::Io {
        path: path.display().to_string(),
        source,
    })
}
