//! Data model for images, animal cutouts, backgrounds, and event streams,
//! plus dataset ingestion (JSONL manifests) and procedural scenario
//! generation with ground truth.

mod manifest;
mod scenario;

pub use manifest::{
    load_manifest, load_scenario_dir, object_classes, write_scenario_dir, ManifestRecord,
};
pub use scenario::{
    generate_scenario, render_background, synthesize_source_set, Scenario, STREAM_BG_ID_BASE,
};

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use image::{RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class identifier; class `0` is always the empty (no-animal) class.
pub type ClassId = usize;

/// The empty class: frames showing a scene with no animal in it.
pub const EMPTY_CLASS: ClassId = 0;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Minimum accepted image edge for ingested data.
pub const MIN_IMAGE_EDGE: u32 = 32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest line {line}: malformed record: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("manifest line {line}: bbox outside unit square")]
    BboxOutsideUnitSquare { line: usize },
    #[error("manifest line {line}: unknown class id {class} (num_classes = {num_classes})")]
    UnknownClass {
        line: usize,
        class: usize,
        num_classes: usize,
    },
    #[error("manifest line {line}: {msg}")]
    InvalidRecord { line: usize, msg: String },
    #[error("image too small: {width}x{height} (minimum edge {min})")]
    ImageTooSmall { width: u32, height: u32, min: u32 },
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("degenerate schedule: {0} has no keyframes")]
    DegenerateSchedule(&'static str),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Normalized bounding box, center + extent, each coordinate in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// True when the whole box lies inside the unit square.
    pub fn inside_unit_square(&self) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        self.w > 0.0 && self.h > 0.0 && x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0
    }

    /// (x0, y0, x1, y1) corner form.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// Daily activity pattern of a species; drives time-preserving synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activity {
    Diurnal,
    Nocturnal,
    Cathemeral,
}

/// Day/night bucket of a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeBucket {
    Day,
    Night,
}

/// Local hour-of-day in `[6, 18)` is day, everything else night.
pub fn time_bucket(timestamp: f64) -> TimeBucket {
    let seconds_of_day = timestamp.rem_euclid(SECONDS_PER_DAY);
    let hour = seconds_of_day / 3600.0;
    if (6.0..18.0).contains(&hour) {
        TimeBucket::Day
    } else {
        TimeBucket::Night
    }
}

/// Seconds since local midnight.
pub fn time_of_day(timestamp: f64) -> f64 {
    timestamp.rem_euclid(SECONDS_PER_DAY)
}

/// Whole days since the scenario epoch.
pub fn day_index(timestamp: f64) -> i64 {
    (timestamp / SECONDS_PER_DAY).floor() as i64
}

/// Circular time-of-day distance in seconds (wraps over midnight).
pub fn time_of_day_distance(a: f64, b: f64) -> f64 {
    let d = (time_of_day(a) - time_of_day(b)).abs();
    d.min(SECONDS_PER_DAY - d)
}

/// An RGB frame with a class label and capture metadata.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub pixels: RgbImage,
    pub label: ClassId,
    /// Seconds since the scenario epoch.
    pub timestamp: f64,
    pub location_id: String,
}

/// A masked cutout of a single animal. The alpha channel is the segmentation
/// mask; `orig_bbox` is where the animal sat in its source frame.
#[derive(Debug, Clone)]
pub struct AnimalObject {
    pub id: u32,
    pub pixels: RgbaImage,
    pub class: ClassId,
    pub orig_bbox: BBox,
    pub activity: Activity,
    pub herd: bool,
}

impl AnimalObject {
    /// Checks the cutout invariants: nonzero mask, class != empty,
    /// bbox inside the unit square.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.class == EMPTY_CLASS {
            return Err("object class must not be the empty class".into());
        }
        if !self.orig_bbox.inside_unit_square() {
            return Err("bbox outside unit square".into());
        }
        if !self.pixels.pixels().any(|p| p.0[3] > 0) {
            return Err("alpha mask has no opaque pixel".into());
        }
        Ok(())
    }
}

/// An empty-scene frame; the unit of environmental drift.
#[derive(Debug, Clone)]
pub struct BackgroundImage {
    /// Stable identity used by the validation cache and sample provenance.
    pub id: u64,
    pub pixels: RgbImage,
    /// Seconds since the scenario epoch.
    pub timestamp: f64,
    pub location_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Animal,
    Background,
}

/// Counts reads of ground-truth labels. The replay loop owns one counter for
/// the evaluator and one for label-using training modes, so tests can assert
/// that the adaptation pipeline itself never touches hidden labels.
#[derive(Debug)]
pub struct LabelAccess {
    name: &'static str,
    count: AtomicU64,
}

impl LabelAccess {
    pub fn new(name: &'static str) -> Self {
        Self {
            name,
            count: AtomicU64::new(0),
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    fn record(&self) {
        self.count.fetch_add(1, Ordering::Relaxed);
    }
}

/// One motion-trigger event of the target stream. The ground-truth label is
/// private; everything the pipeline may use is in `image` and `kind`.
#[derive(Debug, Clone)]
pub struct StreamEvent {
    pub image: LabeledImage,
    pub kind: EventKind,
    hidden_label: ClassId,
}

impl StreamEvent {
    /// `kind == Background` must match `hidden_label == EMPTY_CLASS`.
    pub fn new(image: LabeledImage, kind: EventKind, hidden_label: ClassId) -> Result<Self> {
        let is_bg = kind == EventKind::Background;
        if is_bg != (hidden_label == EMPTY_CLASS) {
            return Err(CorpusError::InvalidConfig(format!(
                "event kind {kind:?} inconsistent with hidden label {hidden_label}"
            )));
        }
        Ok(Self {
            image,
            kind,
            hidden_label,
        })
    }

    pub fn timestamp(&self) -> f64 {
        self.image.timestamp
    }

    /// Ground-truth label; every read is tallied on `access`.
    pub fn hidden_label(&self, access: &LabelAccess) -> ClassId {
        access.record();
        self.hidden_label
    }
}

impl fmt::Display for StreamEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event[t={:.1}s kind={:?}]", self.image.timestamp, self.kind)
    }
}

fn default_image_size() -> u32 {
    96
}
fn default_objects_per_class() -> u32 {
    16
}
fn default_source_images_per_class() -> u32 {
    40
}
fn default_source_backgrounds() -> u32 {
    60
}
fn default_night_dim() -> f64 {
    0.35
}

/// Parameters of a procedurally generated drift scenario.
///
/// Schedules are keyframes `(day, vector)`; values between keyframes are
/// interpolated linearly, clamped to the first/last keyframe outside the
/// covered range. Frequency vectors must sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_classes: usize,
    pub num_days: u32,
    pub arrivals_per_day: f64,
    /// Keyframes of the lighting/season parameter vector
    /// `[brightness, hue_mix, texture_amplitude]`.
    pub background_drift_schedule: Vec<(f64, Vec<f64>)>,
    /// Keyframes of class frequency vectors (length `num_classes`, sum 1).
    pub class_distribution_schedule: Vec<(f64, Vec<f64>)>,
    #[serde(default)]
    pub herd_classes: BTreeSet<ClassId>,
    #[serde(default)]
    pub nocturnal_classes: BTreeSet<ClassId>,
    pub seed: u64,
    /// Edge length of generated frames (square), pixels.
    #[serde(default = "default_image_size")]
    pub image_size: u32,
    #[serde(default = "default_objects_per_class")]
    pub objects_per_class: u32,
    #[serde(default = "default_source_images_per_class")]
    pub source_images_per_class: u32,
    #[serde(default = "default_source_backgrounds")]
    pub source_backgrounds: u32,
    /// Night brightness multiplier; 1.0 removes the day/night visual step.
    #[serde(default = "default_night_dim")]
    pub night_dim: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CorpusError::InvalidConfig(
                "num_classes must be at least 2".into(),
            ));
        }
        if self.background_drift_schedule.is_empty() {
            return Err(CorpusError::DegenerateSchedule("background_drift_schedule"));
        }
        if self.class_distribution_schedule.is_empty() {
            return Err(CorpusError::DegenerateSchedule("class_distribution_schedule"));
        }
        for sched in [
            &self.background_drift_schedule,
            &self.class_distribution_schedule,
        ] {
            if sched.windows(2).any(|w| w[0].0 > w[1].0) {
                return Err(CorpusError::InvalidConfig(
                    "schedule keyframes must be sorted by day".into(),
                ));
            }
        }
        for (day, freqs) in &self.class_distribution_schedule {
            if freqs.len() != self.num_classes {
                return Err(CorpusError::InvalidConfig(format!(
                    "frequency vector at day {day} has length {}, expected {}",
                    freqs.len(),
                    self.num_classes
                )));
            }
            let sum: f64 = freqs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || freqs.iter().any(|f| *f < 0.0) {
                return Err(CorpusError::InvalidConfig(format!(
                    "frequency vector at day {day} must be non-negative and sum to 1 (got {sum})"
                )));
            }
        }
        if self.image_size < MIN_IMAGE_EDGE {
            return Err(CorpusError::InvalidConfig(format!(
                "image_size must be >= {MIN_IMAGE_EDGE}"
            )));
        }
        for c in self.herd_classes.iter().chain(self.nocturnal_classes.iter()) {
            if *c == EMPTY_CLASS || *c >= self.num_classes {
                return Err(CorpusError::InvalidConfig(format!(
                    "class set references invalid class {c}"
                )));
            }
        }
        Ok(())
    }
}
