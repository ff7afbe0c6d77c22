//! Drift detection.
//!
//! Background drift (BDD): each incoming empty-scene frame is compared with a
//! time-of-day-matched reference from a sliding pool using an LSDD two-sample
//! permutation test on pixel samples; significant newcomers enter the
//! background repository. Class-distribution drift (CDD): prediction counts
//! are tested against the distribution at the last fine-tune with a
//! chi-squared test every full window.

mod chi2;
mod lsdd;

pub use chi2::{chi_squared_pvalue, chi_squared_sf, chi_squared_statistic, gamma_q, ln_gamma};
pub use lsdd::{
    lsdd_permutation_test, lsdd_statistic, median_pairwise_distance, subsample_centers, Point3,
};

use std::collections::VecDeque;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{day_index, time_of_day_distance, BackgroundImage, ClassId, EMPTY_CLASS};
use crate::synthesis::ClassDistribution;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("singular system despite ridge (lambda too small)")]
    SingularSystem,
    #[error("expected distribution is all-zero")]
    ExpectedAllZero,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("distribution lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("prediction {0} out of range (num_classes = {1})")]
    PredictionOutOfRange(ClassId, usize),
}

pub type Result<T> = std::result::Result<T, DriftError>;

/// Kernel bandwidth selection for the LSDD basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    MedianHeuristic,
    Fixed(f64),
}

/// Tuning of the LSDD permutation test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LsddParams {
    pub num_centers: usize,
    pub bandwidth: Bandwidth,
    pub lambda: f64,
    pub num_permutations: usize,
    pub pixels_per_image: usize,
}

impl Default for LsddParams {
    fn default() -> Self {
        Self {
            num_centers: 64,
            bandwidth: Bandwidth::MedianHeuristic,
            lambda: 1e-3,
            num_permutations: 100,
            pixels_per_image: 500,
        }
    }
}

/// Bounded, insertion-ordered store of accepted backgrounds. `pool()` is the
/// sliding window of the most recent `pool_window` entries used for
/// reference selection; the full store feeds synthesis.
#[derive(Debug, Clone)]
pub struct BackgroundRepository {
    entries: VecDeque<BackgroundImage>,
    capacity: usize,
    pool_window: usize,
}

impl BackgroundRepository {
    pub fn new(capacity: usize, pool_window: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            pool_window,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pool_window(&self) -> usize {
        self.pool_window
    }

    /// Oldest-to-newest iteration over all entries.
    pub fn iter(&self) -> impl Iterator<Item = &BackgroundImage> {
        self.entries.iter()
    }

    /// The most recent `min(pool_window, len)` entries, oldest first.
    pub fn pool(&self) -> impl Iterator<Item = &BackgroundImage> {
        let skip = self.entries.len().saturating_sub(self.pool_window);
        self.entries.iter().skip(skip)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|b| b.id)
    }

    pub fn contains_id(&self, id: u64) -> bool {
        self.entries.iter().any(|b| b.id == id)
    }

    pub fn get(&self, id: u64) -> Option<&BackgroundImage> {
        self.entries.iter().find(|b| b.id == id)
    }

    /// Append, evicting the oldest entry once at capacity; returns the
    /// evicted background.
    pub fn push(&mut self, bg: BackgroundImage) -> Option<BackgroundImage> {
        let evicted = if self.entries.len() >= self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(bg);
        evicted
    }

    /// Overwrite the entry at `index` (reservoir-style maintenance used by
    /// the random-sampling baseline); returns the replaced background.
    pub fn replace(&mut self, index: usize, bg: BackgroundImage) -> Option<BackgroundImage> {
        let slot = self.entries.get_mut(index)?;
        Some(std::mem::replace(slot, bg))
    }
}

/// Background drift detector state.
#[derive(Debug, Clone)]
pub struct BddState {
    pub repo: BackgroundRepository,
    pub alpha: f64,
    pub lsdd: LsddParams,
}

impl BddState {
    pub fn new(repo: BackgroundRepository, alpha: f64, lsdd: LsddParams) -> Self {
        Self { repo, alpha, lsdd }
    }
}

/// Outcome of one BDD step.
#[derive(Debug, Clone)]
pub struct BddOutcome {
    pub added: bool,
    /// `None` when no test ran (bootstrap insertion into an empty pool).
    pub p_value: Option<f64>,
    /// Id of the background evicted to make room, if any.
    pub evicted: Option<u64>,
}

/// `k` pixels drawn uniformly with replacement, channels scaled to [0, 1].
pub fn pixel_sample(img: &RgbImage, k: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let (w, h) = img.dimensions();
    (0..k)
        .map(|_| {
            let x = rng.random_range(0..w);
            let y = rng.random_range(0..h);
            let p = img.get_pixel(x, y).0;
            [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ]
        })
        .collect()
}

/// Pick the reference background for `cur` from the pool.
///
/// Among pool entries within one hour of `cur`'s time of day (wrapping over
/// midnight), the one with the closest calendar date wins; ties break on the
/// smaller time-of-day difference, then on the more recent insertion. When
/// nothing falls inside the hour window the nearest time-of-day entry is
/// used. An empty pool yields `None`.
pub fn select_reference<'a>(
    repo: &'a BackgroundRepository,
    cur: &BackgroundImage,
) -> Option<&'a BackgroundImage> {
    const HOUR: f64 = 3600.0;
    let cur_day = day_index(cur.timestamp);

    let mut best: Option<(&BackgroundImage, (i64, f64, i64))> = None;
    let mut fallback: Option<(&BackgroundImage, (f64, i64, i64))> = None;
    for (idx, entry) in repo.pool().enumerate() {
        let tod = time_of_day_distance(entry.timestamp, cur.timestamp);
        let date = (day_index(entry.timestamp) - cur_day).abs();
        let recency = -(idx as i64); // lower = more recent insertion
        if tod <= HOUR {
            let better = match &best {
                None => true,
                Some((_, k)) => (date, tod, recency) < *k,
            };
            if better {
                best = Some((entry, (date, tod, recency)));
            }
        }
        let better = match &fallback {
            None => true,
            Some((_, k)) => (tod, date, recency) < *k,
        };
        if better {
            fallback = Some((entry, (tod, date, recency)));
        }
    }
    best.map(|(e, _)| e).or(fallback.map(|(e, _)| e))
}

/// One BDD step: bootstrap-insert into an empty pool, otherwise run the LSDD
/// permutation test against the selected reference and admit the background
/// on significance (evicting the oldest entry at capacity).
pub fn bdd_step(
    state: &mut BddState,
    cur: BackgroundImage,
    rng: &mut impl Rng,
) -> Result<BddOutcome> {
    let p_value = match select_reference(&state.repo, &cur) {
        None => None,
        Some(reference) => {
            let k = state.lsdd.pixels_per_image;
            let x = pixel_sample(&cur.pixels, k, rng);
            let y = pixel_sample(&reference.pixels, k, rng);
            Some(lsdd_permutation_test(&x, &y, &state.lsdd, rng)?)
        }
    };

    match p_value {
        None => {
            state.repo.push(cur);
            Ok(BddOutcome {
                added: true,
                p_value: None,
                evicted: None,
            })
        }
        Some(p) if p < state.alpha => {
            let evicted = state.repo.push(cur).map(|b| b.id);
            Ok(BddOutcome {
                added: true,
                p_value: Some(p),
                evicted,
            })
        }
        Some(p) => Ok(BddOutcome {
            added: false,
            p_value: Some(p),
            evicted: None,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Background,
    ClassDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DriftPayload {
    /// Ids of newly admitted backgrounds.
    Backgrounds(Vec<u64>),
    /// The prediction distribution that tripped the test.
    Distribution(ClassDistribution),
}

/// A detected drift handed to the validation gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftTrigger {
    pub kind: DriftKind,
    pub payload: DriftPayload,
    pub timestamp: f64,
}

/// Class-distribution drift detector state.
#[derive(Debug, Clone)]
pub struct CddState {
    /// Prediction counts of the current window.
    pub recent: ClassDistribution,
    /// Distribution at the last fine-tune.
    pub reference: ClassDistribution,
    /// Window size C: the test runs after every C predictions.
    pub window: usize,
    pub alpha: f64,
}

impl CddState {
    pub fn new(
        num_classes: usize,
        reference: ClassDistribution,
        window: usize,
        alpha: f64,
    ) -> Self {
        Self {
            recent: ClassDistribution::new(num_classes),
            reference,
            window,
            alpha,
        }
    }
}

/// What a CDD step did.
#[derive(Debug, Clone)]
pub enum CddStep {
    /// Window not yet full; the prediction was only counted.
    Accumulating,
    /// Window was empty-class dominated: counts cleared, no test.
    Reset,
    /// Chi-squared test ran; `trigger` is set when p < alpha.
    Tested {
        p_value: f64,
        trigger: Option<DriftTrigger>,
    },
}

/// Count one prediction; on a full window either reset (empty-class
/// dominant) or run the chi-squared test against the reference distribution,
/// emitting a trigger on significance. The window clears after every test or
/// reset.
pub fn cdd_step(state: &mut CddState, prediction: ClassId, now: f64) -> Result<CddStep> {
    if prediction >= state.recent.len() {
        return Err(DriftError::PredictionOutOfRange(
            prediction,
            state.recent.len(),
        ));
    }
    state.recent.increment(prediction);
    if state.recent.total() < state.window as u64 {
        return Ok(CddStep::Accumulating);
    }

    if state.recent.argmax() == Some(EMPTY_CLASS) {
        state.recent.clear();
        return Ok(CddStep::Reset);
    }

    let p_value = chi_squared_pvalue(&state.recent, &state.reference)?;
    let trigger = if p_value < state.alpha {
        Some(DriftTrigger {
            kind: DriftKind::ClassDistribution,
            payload: DriftPayload::Distribution(state.recent.clone()),
            timestamp: now,
        })
    } else {
        None
    };
    state.recent.clear();
    Ok(CddStep::Tested { p_value, trigger })
}
