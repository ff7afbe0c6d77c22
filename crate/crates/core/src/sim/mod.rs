//! Event-driven replay of a timestamped stream through the full pipeline
//! (inference, drift detection, gated validation, fine-tuning), with
//! baselines, parameter sweeps, metrics, and energy accounting.

mod energy;
mod metrics;
mod replay;
pub mod scenarios;
mod sweep;

pub use energy::{
    energy_report, write_energy_csv, EnergyCostTable, EnergyReport, EnergyRow,
    REF_FINE_TUNE_ITERATIONS, REF_FINE_TUNE_ROUND_J, REF_VALIDATION_IMAGES,
    REF_VALIDATION_ROUND_J,
};
pub use metrics::{
    sliding_window_accuracy, BddRecord, CddRecord, CollectedSampleRecord, EnergyCounters,
    FineTuneReason, FineTuneRecord, MetricsLog, PredictionRecord, ValidationRecord,
};
pub use replay::{pretrain_model, replay, replay_full, ReplayOutcome};
pub use sweep::{pareto_sweep, write_frontier_csv, FrontierRow, SweepKnobs};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::drift::{Bandwidth, DriftError, LsddParams};
use crate::model::{ModelError, TrainConfig, TrainableMask};
use crate::synthesis::{SynthesisError, SynthesisPolicy};
use crate::validation::ValidationError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type SimResult<T> = std::result::Result<T, SimError>;

/// Pipeline operating mode: the full adaptive pipeline, its ablations, and
/// the baselines it is compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Synthesis + BDD + CDD + validation-gated fine-tuning.
    WildfitAll,
    /// Synthesis + BDD + validation; no class-distribution detector.
    WildfitSynBdd,
    /// One fine-tune after the repository bootstraps; nothing after.
    WildfitSyn,
    /// Inference only.
    NoFt,
    /// Fine-tune every `days`, repository filled by random sampling.
    Periodic { days: f64 },
    /// Fine-tune every `days`, repository maintained by BDD.
    PeriodicBdd { days: f64 },
    /// Fine-tune immediately on CDD drift at significance `alpha`.
    TriggeredCdd { alpha: f64 },
    /// Full trigger machinery, trained on collected stream images labeled
    /// by the model's own predictions.
    Pseudolabel,
    /// As pseudolabel, but with ground-truth labels.
    Gtlabel,
}

impl Mode {
    /// The repository is maintained by the background drift detector.
    pub fn uses_bdd(&self) -> bool {
        matches!(
            self,
            Mode::WildfitSynBdd
                | Mode::WildfitAll
                | Mode::PeriodicBdd { .. }
                | Mode::TriggeredCdd { .. }
                | Mode::Pseudolabel
                | Mode::Gtlabel
        )
    }

    /// BDD additions are routed through the validation gate.
    pub fn validates_background(&self) -> bool {
        matches!(
            self,
            Mode::WildfitSynBdd | Mode::WildfitAll | Mode::Pseudolabel | Mode::Gtlabel
        )
    }

    /// The class-distribution detector runs.
    pub fn uses_cdd(&self) -> bool {
        matches!(
            self,
            Mode::WildfitAll | Mode::Pseudolabel | Mode::Gtlabel | Mode::TriggeredCdd { .. }
        )
    }

    /// Fine-tuning data comes from collected stream images instead of
    /// synthesis.
    pub fn uses_collected_samples(&self) -> bool {
        matches!(self, Mode::Pseudolabel | Mode::Gtlabel)
    }

    /// The validation cache / reference accuracy machinery is maintained.
    pub fn has_validation_gate(&self) -> bool {
        self.validates_background()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::WildfitAll => write!(f, "wildfit_all"),
            Mode::WildfitSynBdd => write!(f, "wildfit_syn_bdd"),
            Mode::WildfitSyn => write!(f, "wildfit_syn"),
            Mode::NoFt => write!(f, "no_ft"),
            Mode::Periodic { days } => write!(f, "periodic:{days}"),
            Mode::PeriodicBdd { days } => write!(f, "periodic_bdd:{days}"),
            Mode::TriggeredCdd { alpha } => write!(f, "triggered_cdd:{alpha}"),
            Mode::Pseudolabel => write!(f, "pseudolabel"),
            Mode::Gtlabel => write!(f, "gtlabel"),
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |what: &str| -> Result<f64, String> {
            arg.ok_or(format!("mode {name} needs a parameter, e.g. {name}:{what}"))?
                .parse::<f64>()
                .map_err(|e| format!("bad {name} parameter: {e}"))
        };
        match name {
            "wildfit_all" => Ok(Mode::WildfitAll),
            "wildfit_syn_bdd" => Ok(Mode::WildfitSynBdd),
            "wildfit_syn" => Ok(Mode::WildfitSyn),
            "no_ft" => Ok(Mode::NoFt),
            "pseudolabel" => Ok(Mode::Pseudolabel),
            "gtlabel" => Ok(Mode::Gtlabel),
            "periodic" => Ok(Mode::Periodic { days: num("4")? }),
            "periodic_bdd" => Ok(Mode::PeriodicBdd { days: num("4")? }),
            "triggered_cdd" => Ok(Mode::TriggeredCdd { alpha: num("0.05")? }),
            other => Err(format!(
                "unknown mode {other:?}; expected one of wildfit_all, wildfit_syn_bdd, \
                 wildfit_syn, no_ft, periodic:N, periodic_bdd:N, triggered_cdd:P, \
                 pseudolabel, gtlabel"
            )),
        }
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// LSDD tuning as stored in config files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LsddConfig {
    pub centers: usize,
    pub lambda: f64,
    pub permutations: usize,
    pub pixels: usize,
    /// Fixed kernel bandwidth; `null` selects the median heuristic.
    pub bandwidth: Option<f64>,
}

impl Default for LsddConfig {
    fn default() -> Self {
        Self {
            centers: 64,
            lambda: 1e-3,
            permutations: 100,
            pixels: 500,
            bandwidth: None,
        }
    }
}

impl LsddConfig {
    pub fn to_params(self) -> LsddParams {
        LsddParams {
            num_centers: self.centers,
            bandwidth: match self.bandwidth {
                Some(s) => Bandwidth::Fixed(s),
                None => Bandwidth::MedianHeuristic,
            },
            lambda: self.lambda,
            num_permutations: self.permutations,
            pixels_per_image: self.pixels,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BddConfig {
    pub alpha: f64,
    /// Sliding pool used for reference selection; also the bootstrap fill.
    pub pool_window: usize,
    /// Repository capacity (oldest entry evicted beyond this).
    pub capacity: usize,
    pub lsdd: LsddConfig,
}

impl Default for BddConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            pool_window: 80,
            capacity: 250,
            lsdd: LsddConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CddConfig {
    /// Predictions per test window.
    pub window: usize,
    pub alpha: f64,
}

impl Default for CddConfig {
    fn default() -> Self {
        Self {
            window: 100,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Gate threshold: fine-tune when accuracy < acc_ref - thr.
    pub thr: f64,
    /// Minimum stream-days between background-drift validations.
    pub cooldown_days: f64,
    /// Cap on fresh inferences per validation.
    pub max_set_size: usize,
    /// Images synthesized per newly detected background.
    pub per_background: usize,
    /// Images per repository background for the post-fine-tune reference
    /// evaluation.
    pub refresh_per_background: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            thr: 0.0,
            cooldown_days: 2.0,
            max_set_size: 512,
            per_background: 8,
            refresh_per_background: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub location: bool,
    pub herd: bool,
    pub time: bool,
    /// Largest empty-class fraction of a synthesized batch.
    pub empty_cap: f64,
    /// Softening temperature added to every class count.
    pub temperature: u64,
    /// Synthesized samples per fine-tune round.
    pub train_batch: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            location: true,
            herd: true,
            time: true,
            empty_cap: 0.3,
            temperature: 20,
            train_batch: 512,
        }
    }
}

impl SynthConfig {
    pub fn policy(&self) -> SynthesisPolicy {
        SynthesisPolicy {
            location: self.location,
            herd: self.herd,
            time: self.time,
            empty_cap: self.empty_cap,
        }
    }
}

fn default_trainable_mask() -> TrainableMask {
    TrainableMask::LinearBiasNorm
}

/// Desk-scale training defaults: the classic schedule shape (10x lr drop,
/// patience 2/4, batch 32) at step sizes suited to the normalized linear
/// head.
pub fn default_sim_train_config() -> TrainConfig {
    TrainConfig {
        lr_init: 0.5,
        lr_reduced: 0.05,
        scheduler_patience: 2,
        early_stop_patience: 4,
        batch_size: 32,
        max_epochs: 40,
        seed: 0,
        val_split: 0.1,
    }
}

/// Everything one replay needs besides the scenario itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub bdd: BddConfig,
    pub cdd: CddConfig,
    pub validation: ValidationConfig,
    pub train: TrainConfig,
    pub synthesis: SynthConfig,
    #[serde(default = "default_trainable_mask")]
    pub trainable_mask: TrainableMask,
    pub seed: u64,
    /// When set, every synthesized fine-tune batch is dumped as PNGs plus a
    /// JSONL sidecar under this directory.
    pub dump_synth_dir: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::WildfitAll,
            bdd: BddConfig::default(),
            cdd: CddConfig::default(),
            validation: ValidationConfig::default(),
            train: default_sim_train_config(),
            synthesis: SynthConfig::default(),
            trainable_mask: TrainableMask::LinearBiasNorm,
            seed: 0,
            dump_synth_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> SimResult<()> {
        let bad = |msg: String| Err(SimError::Config(msg));
        match self.mode {
            Mode::Periodic { days } | Mode::PeriodicBdd { days } if !(days > 0.0) => {
                return bad(format!("periodic interval must be positive, got {days}"));
            }
            Mode::TriggeredCdd { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                return bad(format!("triggered_cdd alpha must be in (0,1), got {alpha}"));
            }
            _ => {}
        }
        if !(self.bdd.alpha > 0.0 && self.bdd.alpha < 1.0) {
            return bad(format!("bdd.alpha must be in (0,1), got {}", self.bdd.alpha));
        }
        if !(self.cdd.alpha > 0.0 && self.cdd.alpha < 1.0) {
            return bad(format!("cdd.alpha must be in (0,1), got {}", self.cdd.alpha));
        }
        if self.bdd.pool_window == 0 || self.bdd.capacity < self.bdd.pool_window {
            return bad(format!(
                "need capacity >= pool_window >= 1, got {} / {}",
                self.bdd.capacity, self.bdd.pool_window
            ));
        }
        if self.bdd.lsdd.permutations < 20 {
            return bad("bdd.lsdd.permutations must be at least 20".into());
        }
        if self.cdd.window < 2 {
            return bad("cdd.window must be at least 2".into());
        }
        if self.synthesis.train_batch == 0 {
            return bad("synthesis.train_batch must be >= 1".into());
        }
        if self.validation.per_background == 0 || self.validation.refresh_per_background == 0 {
            return bad("validation set sizes must be >= 1".into());
        }
        if self.validation.cooldown_days < 0.0 || self.validation.thr < 0.0 {
            return bad("validation.thr and cooldown_days must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_strings_round_trip() {
        let modes = [
            "wildfit_all",
            "wildfit_syn_bdd",
            "wildfit_syn",
            "no_ft",
            "periodic:4",
            "periodic_bdd:10",
            "triggered_cdd:0.02",
            "pseudolabel",
            "gtlabel",
        ];
        for text in modes {
            let mode: Mode = text.parse().unwrap();
            assert_eq!(mode.to_string(), text);
            let json = serde_json::to_string(&mode).unwrap();
            let back: Mode = serde_json::from_str(&json).unwrap();
            assert_eq!(back, mode);
        }
        assert!("periodic".parse::<Mode>().is_err());
        assert!("warp_drive".parse::<Mode>().is_err());
    }

    #[test]
    fn config_defaults_match_documented_values() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.bdd.alpha, 0.05);
        assert_eq!(cfg.bdd.pool_window, 80);
        assert_eq!(cfg.bdd.capacity, 250);
        assert_eq!(cfg.bdd.lsdd.centers, 64);
        assert_eq!(cfg.bdd.lsdd.permutations, 100);
        assert_eq!(cfg.bdd.lsdd.pixels, 500);
        assert_eq!(cfg.cdd.window, 100);
        assert_eq!(cfg.cdd.alpha, 0.05);
        assert_eq!(cfg.validation.thr, 0.0);
        assert_eq!(cfg.validation.cooldown_days, 2.0);
        assert_eq!(cfg.synthesis.temperature, 20);
        cfg.validate().unwrap();

        // JSON keys mirror the documented config paths.
        let json = serde_json::to_value(&cfg).unwrap();
        assert!(json["bdd"]["lsdd"]["lambda"].is_number());
        assert!(json["cdd"]["window"].is_number());
        assert!(json["validation"]["cooldown_days"].is_number());
    }

    #[test]
    fn config_validation_rejects_mismatches() {
        let mut cfg = PipelineConfig {
            mode: Mode::Periodic { days: 0.0 },
            ..PipelineConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.mode = Mode::WildfitAll;
        cfg.bdd.capacity = 10;
        cfg.bdd.pool_window = 20;
        assert!(cfg.validate().is_err());
        cfg.bdd.capacity = 40;
        cfg.validate().unwrap();
        cfg.bdd.lsdd.permutations = 5;
        assert!(cfg.validate().is_err());
    }
}
