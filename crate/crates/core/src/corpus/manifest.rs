//! JSONL manifest ingestion and scenario-directory persistence.
//!
//! A manifest holds one record per line: animal-object cutouts, background
//! frames, and stream events, each referencing a PNG relative to the
//! manifest's directory. An optional leading `meta` record declares
//! `num_classes` so class ids can be validated; without it the class count is
//! inferred from the data.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::RgbaImage;
use serde::{Deserialize, Serialize};

use super::scenario::{synthesize_source_set, Scenario};
use super::{
    Activity, AnimalObject, BBox, BackgroundImage, ClassId, CorpusError, EventKind, LabelAccess,
    LabeledImage, Result, ScenarioConfig, StreamEvent, EMPTY_CLASS, MIN_IMAGE_EDGE,
};

/// One manifest line. `kind` is `"meta"`, `"object"`, `"background"`, or
/// `"event"`; the remaining fields apply per kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<ClassId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    /// Normalized `[cx, cy, w, h]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activity: Option<Activity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub herd: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location_id: Option<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn open_image(base: &Path, rel: &str) -> Result<image::DynamicImage> {
    let path = base.join(rel);
    if !path.exists() {
        return Err(CorpusError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing file"),
        });
    }
    image::open(&path).map_err(|source| CorpusError::Image {
        path: path.display().to_string(),
        source,
    })
}

fn check_min_size(w: u32, h: u32, line: usize) -> Result<()> {
    if w < MIN_IMAGE_EDGE || h < MIN_IMAGE_EDGE {
        return Err(CorpusError::InvalidRecord {
            line,
            msg: format!("image too small: {w}x{h} (minimum edge {MIN_IMAGE_EDGE})"),
        });
    }
    Ok(())
}

/// Load a JSONL manifest: decode every referenced image, attach masks to
/// objects, and sort events by timestamp. Errors carry the offending line
/// number.
pub fn load_manifest(
    path: &Path,
) -> Result<(Vec<AnimalObject>, Vec<BackgroundImage>, Vec<StreamEvent>)> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut records: Vec<(usize, ManifestRecord)> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| io_err(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&text).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                msg: e.to_string(),
            })?;
        records.push((line_no, rec));
    }

    // Declared class count, if any; otherwise inferred after parsing.
    let declared = records
        .iter()
        .find(|(_, r)| r.kind == "meta")
        .and_then(|(_, r)| r.num_classes);
    let inferred = records
        .iter()
        .filter_map(|(_, r)| r.class)
        .max()
        .map(|m| m + 1)
        .unwrap_or(1);
    let num_classes = declared.unwrap_or(inferred);

    let check_class = |class: ClassId, line: usize| -> Result<()> {
        if class >= num_classes {
            return Err(CorpusError::UnknownClass {
                line,
                class,
                num_classes,
            });
        }
        Ok(())
    };

    let mut objects = Vec::new();
    let mut backgrounds = Vec::new();
    let mut events = Vec::new();

    for (line, rec) in records {
        match rec.kind.as_str() {
            "meta" => {}
            "object" => {
                let file = rec.file.ok_or(CorpusError::MalformedLine {
                    line,
                    msg: "object record needs a file".into(),
                })?;
                let class = rec.class.ok_or(CorpusError::MalformedLine {
                    line,
                    msg: "object record needs a class".into(),
                })?;
                check_class(class, line)?;
                if class == EMPTY_CLASS {
                    return Err(CorpusError::InvalidRecord {
                        line,
                        msg: "object class must not be the empty class".into(),
                    });
                }
                let b = rec.bbox.ok_or(CorpusError::MalformedLine {
                    line,
                    msg: "object record needs a bbox".into(),
                })?;
                let bbox = BBox::new(b[0], b[1], b[2], b[3]);
                if !bbox.inside_unit_square() {
                    return Err(CorpusError::BboxOutsideUnitSquare { line });
                }
                let img = open_image(&base, &file)?;
                let mut rgba: RgbaImage = img.to_rgba8();
                if let Some(mask_rel) = &rec.mask_file {
                    let mask = open_image(&base, mask_rel)?.to_luma8();
                    if mask.dimensions() != rgba.dimensions() {
                        return Err(CorpusError::InvalidRecord {
                            line,
                            msg: "mask dimensions differ from image".into(),
                        });
                    }
                    for (px, m) in rgba.pixels_mut().zip(mask.pixels()) {
                        px.0[3] = m.0[0];
                    }
                }
                let obj = AnimalObject {
                    id: objects.len() as u32,
                    pixels: rgba,
                    class,
                    orig_bbox: bbox,
                    activity: rec.activity.unwrap_or(Activity::Cathemeral),
                    herd: rec.herd.unwrap_or(false),
                };
                obj.validate()
                    .map_err(|msg| CorpusError::InvalidRecord { line, msg })?;
                objects.push(obj);
            }
            "background" => {
                let file = rec.file.ok_or(CorpusError::MalformedLine {
                    line,
                    msg: "background record needs a file".into(),
                })?;
                let timestamp = rec.timestamp.ok_or(CorpusError::MalformedLine {
                    line,
                    msg: "background record needs a timestamp".into(),
                })?;
                if let Some(class) = rec.class {
                    if class != EMPTY_CLASS {
                        return Err(CorpusError::InvalidRecord {
                            line,
                            msg: format!("background class must be {EMPTY_CLASS}"),
                        });
                    }
                }
                let pixels = open_image(&base, &file)?.to_rgb8();
                check_min_size(pixels.width(), pixels.height(), line)?;
                backgrounds.push(BackgroundImage {
                    id: backgrounds.len() as u64,
                    pixels,
                    timestamp,
                    location_id: rec.location_id.unwrap_or_default(),
                });
            }
            "event" => {
                let file = rec.file.ok_or(CorpusError::MalformedLine {
                    line,
                    msg: "event record needs a file".into(),
                })?;
                let timestamp = rec.timestamp.ok_or(CorpusError::MalformedLine {
                    line,
                    msg: "event record needs a timestamp".into(),
                })?;
                let class = rec.class.ok_or(CorpusError::MalformedLine {
                    line,
                    msg: "event record needs a class".into(),
                })?;
                check_class(class, line)?;
                let pixels = open_image(&base, &file)?.to_rgb8();
                check_min_size(pixels.width(), pixels.height(), line)?;
                let kind = if class == EMPTY_CLASS {
                    EventKind::Background
                } else {
                    EventKind::Animal
                };
                events.push(StreamEvent::new(
                    LabeledImage {
                        pixels,
                        label: EMPTY_CLASS,
                        timestamp,
                        location_id: rec.location_id.unwrap_or_default(),
                    },
                    kind,
                    class,
                )?);
            }
            other => {
                return Err(CorpusError::MalformedLine {
                    line,
                    msg: format!("unknown record kind {other:?}"),
                })
            }
        }
    }

    events.sort_by(|a, b| a.timestamp().total_cmp(&b.timestamp()));
    Ok((objects, backgrounds, events))
}

/// Write a scenario as `scenario.json` + `manifest.jsonl` + `images/*.png`.
/// The written directory round-trips through [`load_scenario_dir`].
pub fn write_scenario_dir(scenario: &Scenario, cfg: &ScenarioConfig, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;

    let cfg_path = dir.join("scenario.json");
    let cfg_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&cfg_path, cfg_json).map_err(|e| io_err(&cfg_path, e))?;

    let manifest_path = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;

    let mut write_rec = |rec: &ManifestRecord| -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| io_err(&manifest_path, e))
    };

    write_rec(&ManifestRecord {
        kind: "meta".into(),
        num_classes: Some(scenario.num_classes),
        file: None,
        class: None,
        timestamp: None,
        bbox: None,
        mask_file: None,
        activity: None,
        herd: None,
        location_id: None,
    })?;

    for obj in &scenario.objects {
        let rel = format!("images/obj_{:05}.png", obj.id);
        let path = dir.join(&rel);
        obj.pixels.save(&path).map_err(|source| CorpusError::Image {
            path: path.display().to_string(),
            source,
        })?;
        write_rec(&ManifestRecord {
            kind: "object".into(),
            file: Some(rel),
            class: Some(obj.class),
            timestamp: None,
            bbox: Some([
                obj.orig_bbox.cx,
                obj.orig_bbox.cy,
                obj.orig_bbox.w,
                obj.orig_bbox.h,
            ]),
            mask_file: None,
            activity: Some(obj.activity),
            herd: Some(obj.herd),
            num_classes: None,
            location_id: None,
        })?;
    }

    for bg in &scenario.source_backgrounds {
        let rel = format!("images/bg_{:05}.png", bg.id);
        let path = dir.join(&rel);
        bg.pixels.save(&path).map_err(|source| CorpusError::Image {
            path: path.display().to_string(),
            source,
        })?;
        write_rec(&ManifestRecord {
            kind: "background".into(),
            file: Some(rel),
            class: Some(EMPTY_CLASS),
            timestamp: Some(bg.timestamp),
            bbox: None,
            mask_file: None,
            activity: None,
            herd: None,
            num_classes: None,
            location_id: Some(bg.location_id.clone()),
        })?;
    }

    let persist = LabelAccess::new("scenario-writer");
    for (i, ev) in scenario.stream.iter().enumerate() {
        let rel = format!("images/evt_{:06}.png", i);
        let path = dir.join(&rel);
        ev.image
            .pixels
            .save(&path)
            .map_err(|source| CorpusError::Image {
                path: path.display().to_string(),
                source,
            })?;
        write_rec(&ManifestRecord {
            kind: "event".into(),
            file: Some(rel),
            class: Some(ev.hidden_label(&persist)),
            timestamp: Some(ev.timestamp()),
            bbox: None,
            mask_file: None,
            activity: None,
            herd: None,
            num_classes: None,
            location_id: Some(ev.image.location_id.clone()),
        })?;
    }

    Ok(())
}

/// Default per-class source-set size when a directory has no scenario.json.
const DEFAULT_SOURCE_PER_CLASS: u32 = 40;
/// Source-set seed for directories without scenario.json.
const DEFAULT_SOURCE_SEED: u64 = 0xD5;

/// Load a scenario directory (as written by [`write_scenario_dir`] or
/// assembled by hand). The labeled source training set is re-synthesized
/// deterministically from the objects and backgrounds, so a written
/// scenario replays identically to the in-memory one.
pub fn load_scenario_dir(dir: &Path) -> Result<Scenario> {
    let manifest = dir.join("manifest.jsonl");
    let (objects, backgrounds, stream) = load_manifest(&manifest)?;

    let cfg_path = dir.join("scenario.json");
    let (num_classes, per_class, seed) = if cfg_path.exists() {
        let text = fs::read_to_string(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
        let cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| CorpusError::InvalidConfig(e.to_string()))?;
        (cfg.num_classes, cfg.source_images_per_class, cfg.seed)
    } else {
        let max_class = objects
            .iter()
            .map(|o| o.class)
            .chain(std::iter::once(EMPTY_CLASS))
            .max()
            .unwrap_or(EMPTY_CLASS);
        (max_class + 1, DEFAULT_SOURCE_PER_CLASS, DEFAULT_SOURCE_SEED)
    };

    let source = synthesize_source_set(&objects, &backgrounds, num_classes, per_class, seed);
    Ok(Scenario {
        source,
        stream,
        objects,
        source_backgrounds: backgrounds,
        num_classes,
    })
}

/// Distinct class ids present among objects (diagnostics for loaders).
pub fn object_classes(objects: &[AnimalObject]) -> BTreeSet<ClassId> {
    objects.iter().map(|o| o.class).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage, Rgba};

    fn write_png_rgb(path: &Path, w: u32, h: u32, color: [u8; 3]) {
        RgbImage::from_pixel(w, h, Rgb(color)).save(path).unwrap();
    }

    fn write_png_rgba(path: &Path, w: u32, h: u32, color: [u8; 4]) {
        RgbaImage::from_pixel(w, h, Rgba(color)).save(path).unwrap();
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(&path, "").unwrap();
        let (o, b, e) = load_manifest(&path).unwrap();
        assert!(o.is_empty() && b.is_empty() && e.is_empty());
    }

    #[test]
    fn single_background_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        write_png_rgb(&dir.path().join("bg.png"), 32, 32, [10, 20, 30]);
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            r#"{"kind":"background","file":"bg.png","class":0,"timestamp":3600}"#,
        )
        .unwrap();
        let (_, b, _) = load_manifest(&path).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].timestamp, 3600.0);
        assert_eq!(b[0].pixels.get_pixel(0, 0).0, [10, 20, 30]);
    }

    #[test]
    fn bbox_outside_unit_square_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_png_rgba(&dir.path().join("o.png"), 8, 8, [1, 2, 3, 255]);
        let path = dir.path().join("manifest.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"kind":"meta","num_classes":3}}"#).unwrap();
        writeln!(
            f,
            r#"{{"kind":"object","file":"o.png","class":1,"bbox":[1.2,0.5,0.1,0.1]}}"#
        )
        .unwrap();
        match load_manifest(&path) {
            Err(CorpusError::BboxOutsideUnitSquare { line }) => assert_eq!(line, 2),
            other => panic!("expected bbox error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(&path, "{\"kind\":\"meta\",\"num_classes\":2}\nnot json\n").unwrap();
        match load_manifest(&path) {
            Err(CorpusError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png_rgb(&dir.path().join("e.png"), 32, 32, [0, 0, 0]);
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            "{\"kind\":\"meta\",\"num_classes\":2}\n{\"kind\":\"event\",\"file\":\"e.png\",\"class\":5,\"timestamp\":1}\n",
        )
        .unwrap();
        match load_manifest(&path) {
            Err(CorpusError::UnknownClass { line, class, .. }) => {
                assert_eq!((line, class), (2, 5));
            }
            other => panic!("expected unknown class, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            r#"{"kind":"background","file":"nope.png","class":0,"timestamp":0}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(CorpusError::Io { .. })));
    }

    #[test]
    fn events_are_sorted_by_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        write_png_rgb(&dir.path().join("e.png"), 32, 32, [0, 0, 0]);
        let path = dir.path().join("manifest.jsonl");
        let mut text = String::new();
        for ts in [500.0, 100.0, 300.0] {
            text.push_str(&format!(
                "{{\"kind\":\"event\",\"file\":\"e.png\",\"class\":0,\"timestamp\":{ts}}}\n"
            ));
        }
        fs::write(&path, text).unwrap();
        let (_, _, events) = load_manifest(&path).unwrap();
        let ts: Vec<f64> = events.iter().map(|e| e.timestamp()).collect();
        assert_eq!(ts, vec![100.0, 300.0, 500.0]);
    }

    #[test]
    fn mask_file_becomes_alpha() {
        let dir = tempfile::tempdir().unwrap();
        write_png_rgb(&dir.path().join("o.png"), 8, 8, [9, 9, 9]);
        // Mask: left half transparent.
        let mut mask = image::GrayImage::from_pixel(8, 8, image::Luma([255]));
        for y in 0..8 {
            for x in 0..4 {
                mask.put_pixel(x, y, image::Luma([0]));
            }
        }
        mask.save(dir.path().join("m.png")).unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            r#"{"kind":"object","file":"o.png","mask_file":"m.png","class":1,"bbox":[0.5,0.5,0.2,0.2]}"#,
        )
        .unwrap();
        let (objects, _, _) = load_manifest(&path).unwrap();
        assert_eq!(objects[0].pixels.get_pixel(0, 0).0[3], 0);
        assert_eq!(objects[0].pixels.get_pixel(7, 0).0[3], 255);
    }
}
