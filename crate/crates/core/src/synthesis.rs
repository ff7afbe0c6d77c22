//! Background-aware training-data synthesis.
//!
//! Generates labeled samples by alpha-compositing animal cutouts onto
//! background frames. Three placement policies shape the batch: location
//! preserving (objects near their original positions), herd aware (multiple
//! instances for gregarious species), and time preserving (backgrounds whose
//! time of day matches the species' activity pattern). MixUp and CutMix are
//! provided as whole-image baselines.

use image::imageops::{self, FilterType};
use image::{RgbImage, RgbaImage};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    time_bucket, Activity, AnimalObject, BBox, BackgroundImage, ClassId, LabeledImage, TimeBucket,
    EMPTY_CLASS,
};
use crate::rng::splitmix64;

/// Default center jitter (normalized units per axis) for location-preserving
/// placement.
pub const LOCATION_JITTER: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("composition mixes classes {0} and {1}")]
    MixedClasses(ClassId, ClassId),
    #[error("class distribution is all-zero")]
    EmptyDistribution,
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("empty repository: {0}")]
    EmptyRepo(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, SynthesisError>;

/// Categorical counts over class ids (index = class id, `0` = empty class).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: Vec<u64>,
}

impl ClassDistribution {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn increment(&mut self, class: ClassId) {
        self.counts[class] += 1;
    }

    pub fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    /// First index attaining the maximum count; `None` on an empty vector.
    pub fn argmax(&self) -> Option<ClassId> {
        let max = *self.counts.iter().max()?;
        self.counts.iter().position(|c| *c == max)
    }

    /// Counts normalized to frequencies; all-zero input yields all zeros.
    pub fn frequencies(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|c| *c as f64 / total as f64)
            .collect()
    }
}

/// Softened sampling counts: every class (empty class included) gains
/// `temperature`, smoothing recent counts so rare classes stay represented.
pub fn soften_counts(dist: &ClassDistribution, temperature: u64) -> ClassDistribution {
    ClassDistribution {
        counts: dist.counts.iter().map(|c| c + temperature).collect(),
    }
}

/// Where one object instance lands in a composition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Placement {
    pub object_index: usize,
    pub target_bbox: BBox,
    pub z_order: u32,
}

/// How a synthetic sample was assembled, for caching and inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub background_id: u64,
    pub object_ids: Vec<u32>,
    pub placements: Vec<Placement>,
}

/// One synthesized training/validation image.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub label: ClassId,
    pub provenance: Provenance,
}

/// Flags selecting the synthesis policies of a batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthesisPolicy {
    /// Place objects near their original positions instead of uniformly.
    pub location: bool,
    /// Compose 2..=5 instances for herd species.
    pub herd: bool,
    /// Match background time-of-day to the species' activity pattern.
    pub time: bool,
    /// Largest fraction of a batch the empty class may occupy.
    pub empty_cap: f64,
}

impl Default for SynthesisPolicy {
    fn default() -> Self {
        Self {
            location: true,
            herd: true,
            time: true,
            empty_cap: 0.3,
        }
    }
}

impl SynthesisPolicy {
    pub fn random_placement() -> Self {
        Self {
            location: false,
            herd: false,
            time: false,
            empty_cap: 0.3,
        }
    }
}

/// Target box centered on the original location plus uniform jitter of at
/// most `jitter` per axis, clamped so the box stays inside the unit square.
/// Size is preserved.
pub fn place_location_preserving(orig: &BBox, jitter: f64, rng: &mut impl Rng) -> BBox {
    let dx = rng.random_range(-jitter..=jitter);
    let dy = rng.random_range(-jitter..=jitter);
    clamp_center(orig.cx + dx, orig.cy + dy, orig.w, orig.h)
}

/// Uniformly random center for a box of the given size, inside the unit
/// square.
pub fn place_uniform(w: f64, h: f64, rng: &mut impl Rng) -> BBox {
    let hx = (w.min(1.0)) / 2.0;
    let hy = (h.min(1.0)) / 2.0;
    let cx = rng.random_range(hx..=1.0 - hx);
    let cy = rng.random_range(hy..=1.0 - hy);
    BBox::new(cx, cy, w, h)
}

fn clamp_center(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let hx = (w.min(1.0)) / 2.0;
    let hy = (h.min(1.0)) / 2.0;
    BBox::new(cx.clamp(hx, 1.0 - hx), cy.clamp(hy, 1.0 - hy), w, h)
}

/// Pixel rectangle of a normalized bbox on a `width` x `height` canvas.
/// Returns `(x0, y0, w_px, h_px)`.
fn pixel_rect(bbox: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let w_px = ((bbox.w * width as f64).round() as i64).clamp(1, width as i64) as u32;
    let h_px = ((bbox.h * height as f64).round() as i64).clamp(1, height as i64) as u32;
    let x0 = (((bbox.cx - bbox.w / 2.0) * width as f64).round() as i64)
        .clamp(0, (width - w_px) as i64) as u32;
    let y0 = (((bbox.cy - bbox.h / 2.0) * height as f64).round() as i64)
        .clamp(0, (height - h_px) as i64) as u32;
    (x0, y0, w_px, h_px)
}

/// Integer alpha-over: exact pass-through at alpha 0 and alpha 255.
#[inline]
fn blend_channel(src: u8, dst: u8, alpha: u8) -> u8 {
    let a = alpha as u32;
    ((src as u32 * a + dst as u32 * (255 - a) + 127) / 255) as u8
}

/// Composite object rasters over a background in z-order (painter's
/// algorithm). Objects are bilinearly resized to their target boxes; pixels
/// never covered by object alpha equal the background exactly.
///
/// Placements must be sorted by `z_order` and reference a single class.
pub fn compose(
    bg: &BackgroundImage,
    placements: &[(&AnimalObject, Placement)],
) -> Result<SyntheticSample> {
    debug_assert!(
        placements.windows(2).all(|w| w[0].1.z_order <= w[1].1.z_order),
        "placements must be sorted by z_order"
    );
    let mut label = EMPTY_CLASS;
    for (obj, _) in placements {
        if label == EMPTY_CLASS {
            label = obj.class;
        } else if obj.class != label {
            return Err(SynthesisError::MixedClasses(label, obj.class));
        }
    }

    let mut canvas = bg.pixels.clone();
    let (width, height) = canvas.dimensions();
    for (obj, placement) in placements {
        let (x0, y0, w_px, h_px) = pixel_rect(&placement.target_bbox, width, height);
        let resized: RgbaImage = imageops::resize(&obj.pixels, w_px, h_px, FilterType::Triangle);
        for dy in 0..h_px {
            for dx in 0..w_px {
                let src = resized.get_pixel(dx, dy);
                let alpha = src.0[3];
                if alpha == 0 {
                    continue;
                }
                let dst = canvas.get_pixel_mut(x0 + dx, y0 + dy);
                for ch in 0..3 {
                    dst.0[ch] = blend_channel(src.0[ch], dst.0[ch], alpha);
                }
            }
        }
    }

    Ok(SyntheticSample {
        image: canvas,
        label,
        provenance: Provenance {
            background_id: bg.id,
            object_ids: placements.iter().map(|(o, _)| o.id).collect(),
            placements: placements.iter().map(|(_, p)| *p).collect(),
        },
    })
}

/// Draw `n` class labels proportional to `dist.counts`, holding the empty
/// class to at most `ceil(empty_cap * n)` draws (excess draws are redrawn
/// among the animal classes; the cap is ignored when no animal class has
/// positive weight).
pub fn sample_classes(
    dist: &ClassDistribution,
    n: usize,
    empty_cap: f64,
    rng: &mut impl Rng,
) -> Result<Vec<ClassId>> {
    if dist.total() == 0 {
        return Err(SynthesisError::EmptyDistribution);
    }
    let weights: Vec<f64> = dist.counts.iter().map(|c| *c as f64).collect();
    let animal_total: f64 = weights.iter().skip(1).sum();
    let quota = (empty_cap * n as f64).ceil() as usize;

    let mut labels = Vec::with_capacity(n);
    let mut empties = 0usize;
    for _ in 0..n {
        let mut class = weighted_draw(&weights, rng);
        if class == EMPTY_CLASS && empties >= quota && animal_total > 0.0 {
            class = weighted_draw_skip_empty(&weights, rng);
        }
        if class == EMPTY_CLASS {
            empties += 1;
        }
        labels.push(class);
    }
    Ok(labels)
}

fn weighted_draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn weighted_draw_skip_empty(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().skip(1).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate().skip(1) {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Synthesize `n` labeled samples.
///
/// Classes are drawn proportional to `dist` (normally the softened recent
/// distribution). Backgrounds are uniform over `backgrounds`, restricted to
/// matching time buckets for species with a fixed activity pattern when the
/// time policy is on. Herd species get 2..=5 independently placed instances.
/// Empty-class samples are bare backgrounds. Each sample runs on its own rng
/// stream derived from `(batch seed, sample index)`.
pub fn synthesize_batch(
    objects: &[AnimalObject],
    backgrounds: &[&BackgroundImage],
    dist: &ClassDistribution,
    n: usize,
    policy: &SynthesisPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(SynthesisError::InvalidArgument("n must be >= 1".into()));
    }
    if backgrounds.is_empty() {
        return Err(SynthesisError::EmptyRepo("backgrounds"));
    }
    if dist.total() == 0 {
        return Err(SynthesisError::EmptyDistribution);
    }

    // Classes without any repository object cannot be synthesized; mask them
    // out of the sampling weights (the empty class needs no objects).
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dist.len()];
    for (i, obj) in objects.iter().enumerate() {
        if obj.class < by_class.len() {
            by_class[obj.class].push(i);
        }
    }
    let mut masked = dist.clone();
    for (c, count) in masked.counts.iter_mut().enumerate() {
        if c != EMPTY_CLASS && by_class[c].is_empty() {
            *count = 0;
        }
    }
    if masked.total() == 0 {
        return Err(SynthesisError::EmptyRepo("objects"));
    }

    let labels = sample_classes(&masked, n, policy.empty_cap, rng)?;
    let batch_seed: u64 = rng.random();

    let mut samples = Vec::with_capacity(n);
    for (i, &class) in labels.iter().enumerate() {
        let mut srng = ChaCha8Rng::seed_from_u64(splitmix64(batch_seed ^ i as u64));
        samples.push(synthesize_one(
            objects,
            &by_class,
            backgrounds,
            class,
            policy,
            &mut srng,
        )?);
    }
    Ok(samples)
}

fn synthesize_one(
    objects: &[AnimalObject],
    by_class: &[Vec<usize>],
    backgrounds: &[&BackgroundImage],
    class: ClassId,
    policy: &SynthesisPolicy,
    rng: &mut impl Rng,
) -> Result<SyntheticSample> {
    if class == EMPTY_CLASS {
        let bg = backgrounds[rng.random_range(0..backgrounds.len())];
        return compose(bg, &[]);
    }

    let pool = &by_class[class];
    let first = &objects[pool[rng.random_range(0..pool.len())]];

    // Background choice, optionally restricted by activity pattern.
    let bg = if policy.time && first.activity != Activity::Cathemeral {
        let wanted = match first.activity {
            Activity::Nocturnal => TimeBucket::Night,
            _ => TimeBucket::Day,
        };
        let matching: Vec<&&BackgroundImage> = backgrounds
            .iter()
            .filter(|b| time_bucket(b.timestamp) == wanted)
            .collect();
        if matching.is_empty() {
            backgrounds[rng.random_range(0..backgrounds.len())]
        } else {
            matching[rng.random_range(0..matching.len())]
        }
    } else {
        backgrounds[rng.random_range(0..backgrounds.len())]
    };

    let instances = if policy.herd && first.herd {
        rng.random_range(2..=5usize)
    } else {
        1
    };

    let mut chosen: Vec<(&AnimalObject, Placement)> = Vec::with_capacity(instances);
    for z in 0..instances {
        let obj = if z == 0 {
            first
        } else {
            &objects[pool[rng.random_range(0..pool.len())]]
        };
        let bbox = if policy.location {
            place_location_preserving(&obj.orig_bbox, LOCATION_JITTER, rng)
        } else {
            place_uniform(obj.orig_bbox.w, obj.orig_bbox.h, rng)
        };
        chosen.push((
            obj,
            Placement {
                object_index: z,
                target_bbox: bbox,
                z_order: z as u32,
            },
        ));
    }
    compose(bg, &chosen)
}

/// Linear blend of two same-sized images; pixels are rounded half-up. The
/// soft label is `lambda * onehot(a) + (1 - lambda) * onehot(b)`.
pub fn mixup(
    a: &LabeledImage,
    b: &LabeledImage,
    lambda: f64,
    num_classes: usize,
) -> Result<(RgbImage, Vec<f64>)> {
    let (wa, ha) = a.pixels.dimensions();
    let (wb, hb) = b.pixels.dimensions();
    if (wa, ha) != (wb, hb) {
        return Err(SynthesisError::DimensionMismatch(wa, ha, wb, hb));
    }
    let mut out = RgbImage::new(wa, ha);
    for (dst, (pa, pb)) in out.pixels_mut().zip(a.pixels.pixels().zip(b.pixels.pixels())) {
        for ch in 0..3 {
            let v = lambda * pa.0[ch] as f64 + (1.0 - lambda) * pb.0[ch] as f64;
            dst.0[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut label = vec![0.0; num_classes];
    label[a.label] += lambda;
    label[b.label] += 1.0 - lambda;
    Ok((out, label))
}

/// CutMix with an explicit patch `(x0, y0, x1, y1)` (half-open): the patch of
/// `b` is pasted onto `a`; soft label weights are proportional to pixel
/// areas.
pub fn cutmix_with_rect(
    a: &LabeledImage,
    b: &LabeledImage,
    rect: (u32, u32, u32, u32),
    num_classes: usize,
) -> Result<(RgbImage, Vec<f64>)> {
    let (wa, ha) = a.pixels.dimensions();
    let (wb, hb) = b.pixels.dimensions();
    if (wa, ha) != (wb, hb) {
        return Err(SynthesisError::DimensionMismatch(wa, ha, wb, hb));
    }
    let (x0, y0, x1, y1) = rect;
    let mut out = a.pixels.clone();
    for y in y0..y1.min(ha) {
        for x in x0..x1.min(wa) {
            out.put_pixel(x, y, *b.pixels.get_pixel(x, y));
        }
    }
    let patch = (x1.saturating_sub(x0) as f64) * (y1.saturating_sub(y0) as f64);
    let frac = patch / (wa as f64 * ha as f64);
    let mut label = vec![0.0; num_classes];
    label[a.label] += 1.0 - frac;
    label[b.label] += frac;
    Ok((out, label))
}

/// CutMix with a uniformly random axis-aligned rectangle.
pub fn cutmix(
    a: &LabeledImage,
    b: &LabeledImage,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<(RgbImage, Vec<f64>)> {
    let (w, h) = a.pixels.dimensions();
    let mut xs = [rng.random_range(0..=w), rng.random_range(0..=w)];
    let mut ys = [rng.random_range(0..=h), rng.random_range(0..=h)];
    xs.sort_unstable();
    ys.sort_unstable();
    cutmix_with_rect(a, b, (xs[0], ys[0], xs[1], ys[1]), num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgba;
    use proptest::prelude::*;

    fn gray_bg(id: u64, w: u32, h: u32, level: u8) -> BackgroundImage {
        BackgroundImage {
            id,
            pixels: RgbImage::from_pixel(w, h, image::Rgb([level, level, level])),
            timestamp: 12.0 * 3600.0,
            location_id: "L".into(),
        }
    }

    fn solid_object(id: u32, class: ClassId, color: [u8; 3], bbox: BBox) -> AnimalObject {
        let px = RgbaImage::from_pixel(8, 8, Rgba([color[0], color[1], color[2], 255]));
        AnimalObject {
            id,
            pixels: px,
            class,
            orig_bbox: bbox,
            activity: Activity::Cathemeral,
            herd: false,
        }
    }

    #[test]
    fn soften_counts_examples() {
        let d = ClassDistribution::from_counts(vec![30, 50, 0, 20]);
        assert_eq!(soften_counts(&d, 20).counts, vec![50, 70, 20, 40]);
        assert_eq!(soften_counts(&d, 0).counts, d.counts);
        let zero = ClassDistribution::from_counts(vec![0, 0]);
        assert_eq!(soften_counts(&zero, 5).counts, vec![5, 5]);
    }

    #[test]
    fn place_identity_without_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig = BBox::new(0.5, 0.5, 0.2, 0.2);
        let placed = place_location_preserving(&orig, 0.0, &mut rng);
        assert_eq!((placed.cx, placed.cy), (0.5, 0.5));
        assert_eq!((placed.w, placed.h), (0.2, 0.2));
    }

    #[test]
    fn place_clamps_into_unit_square() {
        // Box poking out of the unit square gets pulled back in even under
        // maximal negative jitter.
        let orig = BBox::new(0.02, 0.5, 0.1, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let placed = place_location_preserving(&orig, 0.05, &mut rng);
            assert!(placed.inside_unit_square(), "escaped: {placed:?}");
        }
    }

    #[test]
    fn place_center_is_unbiased() {
        // Monte-Carlo oracle: mean of 1e4 jittered centers stays within 0.01
        // of the original center.
        let orig = BBox::new(0.5, 0.5, 0.2, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let p = place_location_preserving(&orig, 0.05, &mut rng);
            sx += p.cx;
            sy += p.cy;
        }
        assert!((sx / n as f64 - 0.5).abs() < 0.01);
        assert!((sy / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn compose_empty_is_background() {
        let bg = gray_bg(7, 40, 30, 90);
        let s = compose(&bg, &[]).unwrap();
        assert_eq!(s.label, EMPTY_CLASS);
        assert_eq!(s.image.as_raw(), bg.pixels.as_raw());
        assert_eq!(s.provenance.background_id, 7);
    }

    #[test]
    fn compose_opaque_object_fills_its_box() {
        let bg = gray_bg(1, 40, 40, 10);
        let obj = solid_object(3, 2, [200, 0, 0], BBox::new(0.5, 0.5, 0.25, 0.25));
        let placement = Placement {
            object_index: 0,
            target_bbox: BBox::new(0.5, 0.5, 0.25, 0.25),
            z_order: 0,
        };
        let s = compose(&bg, &[(&obj, placement)]).unwrap();
        assert_eq!(s.label, 2);
        let (x0, y0, w, h) = pixel_rect(&placement.target_bbox, 40, 40);
        for y in 0..40 {
            for x in 0..40 {
                let inside = x >= x0 && x < x0 + w && y >= y0 && y < y0 + h;
                let px = s.image.get_pixel(x, y).0;
                if inside {
                    assert_eq!(px, [200, 0, 0], "inside box at ({x},{y})");
                } else {
                    assert_eq!(px, [10, 10, 10], "background touched at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn compose_higher_z_wins_on_overlap() {
        let bg = gray_bg(1, 40, 40, 10);
        let lo = solid_object(1, 2, [0, 200, 0], BBox::new(0.5, 0.5, 0.4, 0.4));
        let hi = solid_object(2, 2, [0, 0, 200], BBox::new(0.5, 0.5, 0.4, 0.4));
        let pl = |z| Placement {
            object_index: z as usize,
            target_bbox: BBox::new(0.5, 0.5, 0.4, 0.4),
            z_order: z,
        };
        let s = compose(&bg, &[(&lo, pl(0)), (&hi, pl(1))]).unwrap();
        assert_eq!(s.image.get_pixel(20, 20).0, [0, 0, 200]);
    }

    #[test]
    fn compose_rejects_mixed_classes() {
        let bg = gray_bg(1, 40, 40, 10);
        let a = solid_object(1, 1, [1, 2, 3], BBox::new(0.3, 0.3, 0.2, 0.2));
        let b = solid_object(2, 2, [1, 2, 3], BBox::new(0.7, 0.7, 0.2, 0.2));
        let pl = |z| Placement {
            object_index: z as usize,
            target_bbox: BBox::new(0.5, 0.5, 0.2, 0.2),
            z_order: z,
        };
        assert!(matches!(
            compose(&bg, &[(&a, pl(0)), (&b, pl(1))]),
            Err(SynthesisError::MixedClasses(1, 2))
        ));
    }

    #[test]
    fn batch_matches_multinomial_oracle() {
        // Draw counts stay within 3 sigma of the multinomial expectation
        // n * p_c with p = dist/total (empty-class cap chosen non-binding).
        let dist = ClassDistribution::from_counts(vec![50, 70, 20, 40]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels = sample_classes(&dist, 1000, 0.3, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for l in labels {
            counts[l] += 1;
        }
        let total = 180.0;
        for (c, &n_c) in counts.iter().enumerate() {
            let p = dist.counts[c] as f64 / total;
            let mean = 1000.0 * p;
            let sigma = (1000.0 * p * (1.0 - p)).sqrt();
            assert!(
                (n_c as f64 - mean).abs() <= 3.0 * sigma,
                "class {c}: {n_c} vs {mean:.1} +- {sigma:.1}"
            );
        }
    }

    #[test]
    fn batch_respects_herd_and_time_flags() {
        let bgs_owned = vec![
            BackgroundImage {
                id: 0,
                pixels: RgbImage::from_pixel(32, 32, image::Rgb([200, 200, 200])),
                timestamp: 12.0 * 3600.0, // day
                location_id: "L".into(),
            },
            BackgroundImage {
                id: 1,
                pixels: RgbImage::from_pixel(32, 32, image::Rgb([20, 20, 20])),
                timestamp: 23.0 * 3600.0, // night
                location_id: "L".into(),
            },
        ];
        let bgs: Vec<&BackgroundImage> = bgs_owned.iter().collect();
        let mut herd_obj = solid_object(1, 1, [255, 0, 0], BBox::new(0.5, 0.5, 0.2, 0.2));
        herd_obj.herd = true;
        let mut night_obj = solid_object(2, 2, [0, 255, 0], BBox::new(0.5, 0.5, 0.2, 0.2));
        night_obj.activity = Activity::Nocturnal;
        let objects = vec![herd_obj, night_obj];
        let dist = ClassDistribution::from_counts(vec![0, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = synthesize_batch(
            &objects,
            &bgs,
            &dist,
            200,
            &SynthesisPolicy::default(),
            &mut rng,
        )
        .unwrap();
        for s in &samples {
            match s.label {
                1 => assert!(
                    s.provenance.object_ids.len() >= 2,
                    "herd sample with {} instances",
                    s.provenance.object_ids.len()
                ),
                2 => assert_eq!(s.provenance.background_id, 1, "nocturnal got a day bg"),
                other => panic!("unexpected label {other}"),
            }
        }
    }

    #[test]
    fn batch_rejects_zero_distribution() {
        let bg = gray_bg(0, 32, 32, 128);
        let bgs = vec![&bg];
        let objs = vec![solid_object(1, 1, [1, 1, 1], BBox::new(0.5, 0.5, 0.2, 0.2))];
        let dist = ClassDistribution::from_counts(vec![0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            synthesize_batch(&objs, &bgs, &dist, 10, &SynthesisPolicy::default(), &mut rng),
            Err(SynthesisError::EmptyDistribution)
        ));
    }

    #[test]
    fn batch_is_deterministic() {
        let bg = gray_bg(0, 32, 32, 128);
        let bgs = vec![&bg];
        let objs = vec![solid_object(1, 1, [9, 9, 9], BBox::new(0.5, 0.5, 0.3, 0.3))];
        let dist = ClassDistribution::from_counts(vec![1, 3]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            synthesize_batch(&objs, &bgs, &dist, 32, &SynthesisPolicy::default(), &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.image.as_raw(), y.image.as_raw());
        }
    }

    #[test]
    fn mixup_examples() {
        let img = |level: u8, label| LabeledImage {
            pixels: RgbImage::from_pixel(8, 8, image::Rgb([level, level, level])),
            label,
            timestamp: 0.0,
            location_id: "L".into(),
        };
        let a = img(0, 1);
        let b = img(255, 2);
        let (out, lbl) = mixup(&a, &b, 1.0, 3).unwrap();
        assert_eq!(out.as_raw(), a.pixels.as_raw());
        assert_eq!(lbl, vec![0.0, 1.0, 0.0]);
        let (out, _) = mixup(&a, &b, 0.0, 3).unwrap();
        assert_eq!(out.as_raw(), b.pixels.as_raw());
        // Round half up: 127.5 -> 128.
        let (out, lbl) = mixup(&a, &b, 0.5, 3).unwrap();
        assert!(out.pixels().all(|p| p.0 == [128, 128, 128]));
        assert_eq!(lbl, vec![0.0, 0.5, 0.5]);

        let small = LabeledImage {
            pixels: RgbImage::new(4, 4),
            label: 0,
            timestamp: 0.0,
            location_id: "L".into(),
        };
        assert!(mixup(&a, &small, 0.5, 3).is_err());
    }

    #[test]
    fn cutmix_rect_examples() {
        let img = |level: u8, label| LabeledImage {
            pixels: RgbImage::from_pixel(8, 8, image::Rgb([level, level, level])),
            label,
            timestamp: 0.0,
            location_id: "L".into(),
        };
        let a = img(0, 1);
        let b = img(255, 2);
        let (out, lbl) = cutmix_with_rect(&a, &b, (0, 0, 8, 8), 3).unwrap();
        assert_eq!(out.as_raw(), b.pixels.as_raw());
        assert_eq!(lbl, vec![0.0, 0.0, 1.0]);
        let (out, lbl) = cutmix_with_rect(&a, &b, (3, 3, 3, 3), 3).unwrap();
        assert_eq!(out.as_raw(), a.pixels.as_raw());
        assert_eq!(lbl, vec![0.0, 1.0, 0.0]);
        // 25% patch -> label weights (0.75, 0.25).
        let (_, lbl) = cutmix_with_rect(&a, &b, (0, 0, 4, 4), 3).unwrap();
        assert!((lbl[1] - 0.75).abs() < 1e-12);
        assert!((lbl[2] - 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softening_is_exact_and_keeps_argmax(
            counts in proptest::collection::vec(0u64..1000, 2..8),
            temp in 0u64..100,
        ) {
            let dist = ClassDistribution::from_counts(counts.clone());
            let soft = soften_counts(&dist, temp);
            for (c, raw) in counts.iter().enumerate() {
                prop_assert_eq!(soft.counts[c], raw + temp);
            }
            // Argmax is preserved whenever it is unique.
            let max = *counts.iter().max().unwrap();
            if counts.iter().filter(|c| **c == max).count() == 1 {
                prop_assert_eq!(dist.argmax(), soft.argmax());
            }
        }

        #[test]
        fn compose_preserves_background_outside_alpha(
            seed in 0u64..500,
            bw in 24u32..48,
            bh in 24u32..48,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bg = gray_bg(0, bw, bh, 77);
            // Object with a transparent left half.
            let mut px = RgbaImage::from_pixel(10, 10, Rgba([250, 10, 10, 255]));
            for y in 0..10 {
                for x in 0..5 {
                    px.put_pixel(x, y, Rgba([0, 0, 0, 0]));
                }
            }
            let obj = AnimalObject {
                id: 1,
                pixels: px,
                class: 1,
                orig_bbox: BBox::new(0.5, 0.5, 0.3, 0.3),
                activity: Activity::Cathemeral,
                herd: false,
            };
            let bbox = place_location_preserving(&obj.orig_bbox, 0.05, &mut rng);
            let placement = Placement { object_index: 0, target_bbox: bbox, z_order: 0 };
            let s = compose(&bg, &[(&obj, placement)]).unwrap();
            // Recompute the alpha support and check the complement.
            let (x0, y0, w, h) = pixel_rect(&bbox, bw, bh);
            let resized: RgbaImage =
                imageops::resize(&obj.pixels, w, h, FilterType::Triangle);
            for y in 0..bh {
                for x in 0..bw {
                    let alpha = if x >= x0 && x < x0 + w && y >= y0 && y < y0 + h {
                        resized.get_pixel(x - x0, y - y0).0[3]
                    } else {
                        0
                    };
                    if alpha == 0 {
                        prop_assert_eq!(s.image.get_pixel(x, y).0, [77, 77, 77]);
                    }
                }
            }
        }
    }
}
