//! Procedural drift scenarios with ground truth.
//!
//! Backgrounds are rendered from a small lighting/season parameter vector
//! (interpolated between schedule keyframes), each animal class is a distinct
//! colored glyph (shape + pattern), and arrivals follow a Poisson process.
//! Animal frames are assembled with the same compositing primitive the
//! synthesizer uses, so every hidden label is sound by construction.

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::{
    time_bucket, Activity, AnimalObject, BBox, BackgroundImage, ClassId, CorpusError,
    EventKind, LabeledImage, Result, ScenarioConfig, StreamEvent, TimeBucket, EMPTY_CLASS,
    SECONDS_PER_DAY,
};
use crate::rng::{derive_rng, derive_seed, splitmix64};
use crate::synthesis::{
    compose, place_location_preserving, synthesize_batch, ClassDistribution, Placement,
    SynthesisPolicy, LOCATION_JITTER,
};

// Sub-stream tags; changing one reshuffles only that component.
const TAG_TERRAIN: u64 = 0x01;
const TAG_OBJECTS: u64 = 0x02;
const TAG_ARRIVALS: u64 = 0x03;
const TAG_SOURCE: u64 = 0x04;
const TAG_EVENT_NOISE: u64 = 0x05;
const TAG_SOURCE_BG: u64 = 0x06;

/// Background ids of stream events start here; source backgrounds count up
/// from zero, so the two ranges never collide.
pub const STREAM_BG_ID_BASE: u64 = 1_000_000;

/// Everything a replay needs: a labeled source-domain training set, the
/// timestamped target stream, the frozen animal-object repository, and the
/// source backgrounds the training set was synthesized from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub source: Vec<LabeledImage>,
    pub stream: Vec<StreamEvent>,
    pub objects: Vec<AnimalObject>,
    pub source_backgrounds: Vec<BackgroundImage>,
    pub num_classes: usize,
}

/// Piecewise-linear interpolation over `(day, vector)` keyframes, clamped to
/// the first/last keyframe outside the covered range.
fn interpolate_schedule(schedule: &[(f64, Vec<f64>)], day: f64) -> Vec<f64> {
    if day <= schedule[0].0 {
        return schedule[0].1.clone();
    }
    let last = schedule.last().unwrap();
    if day >= last.0 {
        return last.1.clone();
    }
    for w in schedule.windows(2) {
        let (d0, v0) = (&w[0].0, &w[0].1);
        let (d1, v1) = (&w[1].0, &w[1].1);
        if day >= *d0 && day <= *d1 {
            let t = if d1 > d0 { (day - d0) / (d1 - d0) } else { 0.0 };
            return v0
                .iter()
                .zip(v1.iter())
                .map(|(a, b)| a + t * (b - a))
                .collect();
        }
    }
    last.1.clone()
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    ]
}

/// Deterministic per-block terrain offset in [-1, 1].
fn terrain_noise(seed: u64, bx: u32, by: u32) -> f64 {
    let h = splitmix64(seed ^ ((bx as u64) << 32) ^ by as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Render the empty scene at `timestamp`.
///
/// The lighting/season parameter vector `[brightness, hue_mix, texture_amp]`
/// is interpolated from the drift schedule at the timestamp's day. Terrain
/// structure is fixed per scenario seed; `noise_tag` selects the per-frame
/// sensor-noise stream so any frame can be re-rendered bit-exactly.
pub fn render_background(cfg: &ScenarioConfig, timestamp: f64, noise_tag: u64) -> RgbImage {
    let day = timestamp / SECONDS_PER_DAY;
    let params = interpolate_schedule(&cfg.background_drift_schedule, day);
    let brightness = params.first().copied().unwrap_or(0.9);
    let hue = params.get(1).copied().unwrap_or(0.3).clamp(0.0, 1.0);
    let tex_amp = params.get(2).copied().unwrap_or(0.5).clamp(0.0, 1.0);

    let night = time_bucket(timestamp) == TimeBucket::Night;
    let light = brightness * if night { cfg.night_dim } else { 1.0 };
    // Moonlight leans blue.
    let filter = if night {
        [0.85, 0.92, 1.12]
    } else {
        [1.0, 1.0, 1.0]
    };

    let sky = lerp3([0.45, 0.62, 0.92], [0.95, 0.75, 0.55], hue);
    let ground = lerp3([0.30, 0.55, 0.25], [0.60, 0.42, 0.20], hue);

    let terrain_seed = derive_seed(cfg.seed, TAG_TERRAIN);
    let mut noise = derive_rng(cfg.seed, splitmix64(TAG_EVENT_NOISE ^ noise_tag));

    let size = cfg.image_size;
    let horizon = (size as f64 * 0.42) as u32;
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        let base = if y < horizon { sky } else { ground };
        for x in 0..size {
            let bump = terrain_noise(terrain_seed, x / 8, y / 8) * 0.06 * tex_amp;
            let grain: f64 = noise.random_range(-0.02..=0.02);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = ((base[ch] + bump) * light * filter[ch] + grain).clamp(0.0, 1.0);
                px[ch] = (v * 255.0).round() as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse,
    Rect,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

#[derive(Clone, Copy)]
enum Pattern {
    Solid,
    Stripes,
    Dots,
    Checker,
}

struct GlyphStyle {
    color: [f64; 3],
    shape: Shape,
    pattern: Pattern,
}

/// Fixed, well-separated styling per class id (class 0 has none).
fn class_style(class: ClassId) -> GlyphStyle {
    const PALETTE: [[f64; 3]; 8] = [
        [0.92, 0.10, 0.10], // red
        [0.95, 0.85, 0.05], // yellow
        [0.05, 0.80, 0.90], // cyan
        [0.90, 0.10, 0.85], // magenta
        [0.95, 0.55, 0.05], // orange
        [0.50, 0.15, 0.90], // violet
        [0.55, 0.95, 0.10], // green
        [0.95, 0.95, 0.95], // white
    ];
    const SHAPES: [Shape; 6] = [
        Shape::Ellipse,
        Shape::Rect,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Ring,
        Shape::Cross,
    ];
    const PATTERNS: [Pattern; 4] = [
        Pattern::Solid,
        Pattern::Stripes,
        Pattern::Dots,
        Pattern::Checker,
    ];
    let k = class - 1;
    let mut color = PALETTE[k % PALETTE.len()];
    if k >= PALETTE.len() {
        // Golden-angle hue rotation keeps extra classes distinct.
        let t = (k as f64 * 0.381_966) % 1.0;
        color = [color[0], (color[1] + t) % 1.0, (color[2] + 0.5 * t) % 1.0];
    }
    GlyphStyle {
        color,
        shape: SHAPES[k % SHAPES.len()],
        pattern: PATTERNS[(k / SHAPES.len() + k) % PATTERNS.len()],
    }
}

fn inside_shape(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Ellipse => u * u + v * v <= 0.9,
        Shape::Rect => u.abs() <= 0.85 && v.abs() <= 0.7,
        Shape::Triangle => v >= -0.9 && v <= 0.9 && u.abs() <= 0.9 * (0.9 - v) / 1.8,
        Shape::Diamond => u.abs() + v.abs() <= 0.95,
        Shape::Ring => {
            let r = (u * u + v * v).sqrt();
            (0.45..=0.95).contains(&r)
        }
        Shape::Cross => (u.abs() <= 0.32 || v.abs() <= 0.32) && u.abs() <= 0.9 && v.abs() <= 0.9,
    }
}

fn pattern_factor(pattern: Pattern, u: f64, v: f64, phase: f64) -> f64 {
    match pattern {
        Pattern::Solid => 1.0,
        Pattern::Stripes => {
            if ((v * 3.0 + phase).floor() as i64).rem_euclid(2) == 0 {
                1.0
            } else {
                0.45
            }
        }
        Pattern::Dots => {
            let fu = (u * 3.0 + phase).fract() - 0.5;
            let fv = (v * 3.0).fract() - 0.5;
            if fu * fu + fv * fv < 0.09 {
                0.35
            } else {
                1.0
            }
        }
        Pattern::Checker => {
            let a = ((u * 2.5 + phase).floor() as i64).rem_euclid(2);
            let b = ((v * 2.5).floor() as i64).rem_euclid(2);
            if a == b {
                1.0
            } else {
                0.5
            }
        }
    }
}

const GLYPH_CANVAS: u32 = 40;

fn render_glyph(class: ClassId, rng: &mut impl Rng) -> RgbaImage {
    let style = class_style(class);
    let jitter: [f64; 3] = [
        rng.random_range(-0.05..=0.05),
        rng.random_range(-0.05..=0.05),
        rng.random_range(-0.05..=0.05),
    ];
    let phase: f64 = rng.random_range(0.0..2.0);
    let squish: f64 = rng.random_range(0.85..1.15);

    let n = GLYPH_CANVAS;
    let mut img = RgbaImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let v = ((y as f64 + 0.5) / n as f64 * 2.0 - 1.0) * squish;
            if inside_shape(style.shape, u, v) {
                let f = pattern_factor(style.pattern, u, v, phase);
                let mut px = [0u8; 4];
                for ch in 0..3 {
                    px[ch] = (((style.color[ch] + jitter[ch]) * f).clamp(0.0, 1.0) * 255.0).round()
                        as u8;
                }
                px[3] = 255;
                img.put_pixel(x, y, Rgba(px));
            }
        }
    }
    img
}

fn generate_objects(cfg: &ScenarioConfig) -> Vec<AnimalObject> {
    let mut rng = derive_rng(cfg.seed, TAG_OBJECTS);
    let mut objects = Vec::new();
    let mut next_id = 0u32;
    for class in 1..cfg.num_classes {
        let activity = if cfg.nocturnal_classes.contains(&class) {
            Activity::Nocturnal
        } else {
            Activity::Cathemeral
        };
        let herd = cfg.herd_classes.contains(&class);
        for _ in 0..cfg.objects_per_class {
            let pixels = render_glyph(class, &mut rng);
            let w: f64 = 0.34 * rng.random_range(0.85..=1.15);
            let h: f64 = w * rng.random_range(0.85..=1.15);
            let cx: f64 = rng.random_range(0.2..=0.8);
            let cy: f64 = rng.random_range(0.58..=0.82);
            let bbox = BBox::new(
                cx.clamp(w / 2.0, 1.0 - w / 2.0),
                cy.clamp(h / 2.0, 1.0 - h / 2.0),
                w,
                h,
            );
            objects.push(AnimalObject {
                id: next_id,
                pixels,
                class,
                orig_bbox: bbox,
                activity,
                herd,
            });
            next_id += 1;
        }
    }
    objects
}

/// Synthesize the labeled source-domain training set: `per_class` images per
/// class (empty class included) over the given backgrounds. Deterministic in
/// `seed`; the replay loader rebuilds the identical set from a written
/// scenario directory.
pub fn synthesize_source_set(
    objects: &[AnimalObject],
    backgrounds: &[BackgroundImage],
    num_classes: usize,
    per_class: u32,
    seed: u64,
) -> Vec<LabeledImage> {
    if backgrounds.is_empty() || per_class == 0 {
        return Vec::new();
    }
    let mut rng = derive_rng(seed, TAG_SOURCE);
    let bg_refs: Vec<&BackgroundImage> = backgrounds.iter().collect();
    let mut out = Vec::new();
    for class in 0..num_classes {
        if class != EMPTY_CLASS && !objects.iter().any(|o| o.class == class) {
            continue;
        }
        let mut counts = vec![0u64; num_classes];
        counts[class] = 1;
        let dist = ClassDistribution::from_counts(counts);
        let policy = SynthesisPolicy {
            empty_cap: 1.0,
            ..SynthesisPolicy::default()
        };
        let batch = synthesize_batch(
            objects,
            &bg_refs,
            &dist,
            per_class as usize,
            &policy,
            &mut rng,
        )
        .expect("source synthesis cannot fail with non-empty inputs");
        for sample in batch {
            let ts = backgrounds
                .iter()
                .find(|b| b.id == sample.provenance.background_id)
                .map(|b| b.timestamp)
                .unwrap_or(0.0);
            out.push(LabeledImage {
                pixels: sample.image,
                label: sample.label,
                timestamp: ts,
                location_id: "source".into(),
            });
        }
    }
    out
}

/// Generate a full scenario: source training set, target stream with ground
/// truth, and the object repository. Identical configurations (including the
/// seed) produce bit-identical output.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;

    let objects = generate_objects(cfg);

    // Source-domain backgrounds: day-0 conditions, times spread over the day.
    let mut bg_rng = derive_rng(cfg.seed, TAG_SOURCE_BG);
    let mut source_backgrounds = Vec::new();
    for j in 0..cfg.source_backgrounds {
        let ts: f64 = bg_rng.random_range(0.0..SECONDS_PER_DAY);
        source_backgrounds.push(BackgroundImage {
            id: j as u64,
            pixels: render_background(cfg, ts, (1 << 40) + j as u64),
            timestamp: ts,
            location_id: "source".into(),
        });
    }

    let source = synthesize_source_set(
        &objects,
        &source_backgrounds,
        cfg.num_classes,
        cfg.source_images_per_class,
        cfg.seed,
    );

    // Target stream: Poisson arrivals; class drawn from the schedule at the
    // arrival time, nocturnal classes restricted to night timestamps.
    let mut arrivals = derive_rng(cfg.seed, TAG_ARRIVALS);
    let rate_per_sec = cfg.arrivals_per_day / SECONDS_PER_DAY;
    let exp = Exp::new(rate_per_sec).map_err(|_| {
        CorpusError::InvalidConfig("arrivals_per_day must be positive".into())
    })?;
    let horizon = cfg.num_days as f64 * SECONDS_PER_DAY;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_classes];
    for (i, obj) in objects.iter().enumerate() {
        by_class[obj.class].push(i);
    }

    let mut stream = Vec::new();
    let mut t = 0.0_f64;
    let mut event_index: u64 = 0;
    loop {
        t += exp.sample(&mut arrivals);
        if t >= horizon {
            break;
        }
        let day = t / SECONDS_PER_DAY;
        let mut freqs = interpolate_schedule(&cfg.class_distribution_schedule, day);
        if time_bucket(t) == TimeBucket::Day {
            for c in &cfg.nocturnal_classes {
                freqs[*c] = 0.0;
            }
        }
        // Classes without objects cannot be rendered.
        for (c, f) in freqs.iter_mut().enumerate() {
            if c != EMPTY_CLASS && by_class[c].is_empty() {
                *f = 0.0;
            }
        }
        let total: f64 = freqs.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let mut u = arrivals.random::<f64>() * total;
        let mut class = EMPTY_CLASS;
        for (c, f) in freqs.iter().enumerate() {
            u -= f;
            if u < 0.0 {
                class = c;
                break;
            }
        }

        let bg = BackgroundImage {
            id: STREAM_BG_ID_BASE + event_index,
            pixels: render_background(cfg, t, event_index),
            timestamp: t,
            location_id: "target".into(),
        };

        let event = if class == EMPTY_CLASS {
            StreamEvent::new(
                LabeledImage {
                    pixels: bg.pixels,
                    label: EMPTY_CLASS,
                    timestamp: t,
                    location_id: "target".into(),
                },
                EventKind::Background,
                EMPTY_CLASS,
            )?
        } else {
            let pool = &by_class[class];
            let first = &objects[pool[arrivals.random_range(0..pool.len())]];
            let instances = if first.herd {
                arrivals.random_range(2..=5usize)
            } else {
                1
            };
            let mut picked: Vec<(&AnimalObject, Placement)> = Vec::with_capacity(instances);
            for z in 0..instances {
                let obj = if z == 0 {
                    first
                } else {
                    &objects[pool[arrivals.random_range(0..pool.len())]]
                };
                let bbox = place_location_preserving(&obj.orig_bbox, LOCATION_JITTER, &mut arrivals);
                picked.push((
                    obj,
                    Placement {
                        object_index: z,
                        target_bbox: bbox,
                        z_order: z as u32,
                    },
                ));
            }
            let sample =
                compose(&bg, &picked).expect("single-class composition cannot mix classes");
            StreamEvent::new(
                LabeledImage {
                    pixels: sample.image,
                    label: EMPTY_CLASS, // ground truth lives in hidden_label only
                    timestamp: t,
                    location_id: "target".into(),
                },
                EventKind::Animal,
                class,
            )?
        };
        stream.push(event);
        event_index += 1;
    }

    Ok(Scenario {
        source,
        stream,
        objects,
        source_backgrounds,
        num_classes: cfg.num_classes,
    })
}
