//! Ready-made scenario and pipeline presets.
//!
//! The "standard" drifting scenario carries a strong lighting/season shift
//! plus a mid-run population shift; the "compact" variant trades size for
//! speed (smaller frames, shorter run, lighter detector settings) and backs
//! headless sweeps and ablations. The "stationary" scenario holds every
//! schedule constant and removes the day/night step so detector calibration
//! can be measured under a true null.

use std::collections::BTreeSet;

use crate::corpus::ScenarioConfig;
use crate::model::TrainConfig;

use super::{default_sim_train_config, PipelineConfig};

/// The standard drifting scenario: 5 classes (empty + 4 glyph species, one
/// herd species, one nocturnal), brightness/hue drifting over the run, and a
/// class-distribution shift in the second half.
pub fn standard_drift_scenario(seed: u64, num_days: u32) -> ScenarioConfig {
    let d = num_days as f64;
    ScenarioConfig {
        num_classes: 5,
        num_days,
        arrivals_per_day: 48.0,
        background_drift_schedule: vec![
            (0.0, vec![0.95, 0.15, 0.6]),
            (0.40 * d, vec![0.80, 0.45, 0.6]),
            (0.70 * d, vec![0.60, 0.70, 0.6]),
            (d, vec![0.45, 0.90, 0.6]),
        ],
        class_distribution_schedule: vec![
            (0.0, vec![0.30, 0.30, 0.20, 0.10, 0.10]),
            (0.45 * d, vec![0.30, 0.25, 0.15, 0.15, 0.15]),
            (0.75 * d, vec![0.30, 0.10, 0.10, 0.25, 0.25]),
            (d, vec![0.30, 0.10, 0.10, 0.25, 0.25]),
        ],
        herd_classes: BTreeSet::from([2]),
        nocturnal_classes: BTreeSet::from([4]),
        seed,
        image_size: 96,
        objects_per_class: 16,
        source_images_per_class: 40,
        source_backgrounds: 60,
        night_dim: 0.35,
    }
}

/// Compact variant of the standard scenario for sweeps and multi-seed
/// ablations: 10 days, 64x64 frames, smaller repositories.
pub fn compact_drift_scenario(seed: u64) -> ScenarioConfig {
    let mut cfg = standard_drift_scenario(seed, 10);
    cfg.arrivals_per_day = 36.0;
    cfg.image_size = 64;
    cfg.objects_per_class = 12;
    cfg.source_images_per_class = 24;
    cfg.source_backgrounds = 32;
    cfg.class_distribution_schedule = vec![
        (0.0, vec![0.35, 0.28, 0.17, 0.10, 0.10]),
        (4.5, vec![0.35, 0.20, 0.13, 0.16, 0.16]),
        (7.5, vec![0.35, 0.09, 0.08, 0.24, 0.24]),
        (10.0, vec![0.35, 0.09, 0.08, 0.24, 0.24]),
    ];
    cfg
}

/// A stationary scenario: constant schedules, uniform lighting around the
/// clock, no nocturnal species. Under this null the detector's add rate
/// should sit near its significance level.
pub fn stationary_scenario(seed: u64, num_days: u32) -> ScenarioConfig {
    ScenarioConfig {
        num_classes: 4,
        num_days,
        arrivals_per_day: 48.0,
        background_drift_schedule: vec![(0.0, vec![0.85, 0.35, 0.6])],
        class_distribution_schedule: vec![(0.0, vec![0.35, 0.25, 0.25, 0.15])],
        herd_classes: BTreeSet::new(),
        nocturnal_classes: BTreeSet::new(),
        seed,
        image_size: 64,
        objects_per_class: 12,
        source_images_per_class: 24,
        source_backgrounds: 32,
        night_dim: 1.0,
    }
}

/// Pipeline defaults for the standard scenario.
pub fn standard_pipeline(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        ..PipelineConfig::default()
    }
}

/// Pipeline tuned to the compact scenario: smaller pool and repository,
/// lighter permutation test, smaller batches. Detector semantics are
/// unchanged.
pub fn compact_pipeline(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.bdd.pool_window = 24;
    cfg.bdd.capacity = 100;
    cfg.bdd.lsdd.centers = 32;
    cfg.bdd.lsdd.permutations = 50;
    cfg.bdd.lsdd.pixels = 200;
    cfg.cdd.window = 60;
    cfg.validation.per_background = 6;
    cfg.validation.max_set_size = 256;
    cfg.validation.refresh_per_background = 2;
    cfg.validation.cooldown_days = 1.0;
    cfg.synthesis.train_batch = 256;
    cfg.train = TrainConfig {
        max_epochs: 30,
        ..default_sim_train_config()
    };
    cfg
}
