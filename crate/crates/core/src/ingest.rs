//! COCO annotation / result file I/O and the annotation corruption pipeline.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::matching::iou;
use crate::model::{clamp_score, BBox, CategoryId, DetectionRecord, GroundTruthRecord, ImageId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub width: f64,
    pub height: f64,
}

/// Images, non-crowd ground truths and categories of an annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub ground_truths: Vec<GroundTruthRecord>,
    pub categories: Vec<(CategoryId, String)>,
    image_index: BTreeMap<ImageId, usize>,
}

impl Dataset {
    /// Validates references and clips every box to its image.
    pub fn new(
        images: Vec<ImageInfo>,
        ground_truths: Vec<GroundTruthRecord>,
        categories: Vec<(CategoryId, String)>,
    ) -> Result<Self> {
        let mut image_index = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if !(img.width > 0.0 && img.height > 0.0) {
                return Err(Error::Parse(format!("image {} has non-positive dimensions", img.id)));
            }
            if image_index.insert(img.id, i).is_some() {
                return Err(Error::Parse(format!("duplicate image id {}", img.id)));
            }
        }
        let mut gts = Vec::with_capacity(ground_truths.len());
        for mut gt in ground_truths {
            let img = image_index
                .get(&gt.image_id)
                .map(|i| images[*i])
                .ok_or_else(|| {
                    Error::Parse(format!(
                        "annotation {} refers to unknown image_id {}",
                        gt.id, gt.image_id
                    ))
                })?;
            if !gt.bbox.is_valid() {
                return Err(Error::Parse(format!(
                    "annotation {} has non-positive box dimensions {:?}",
                    gt.id,
                    gt.bbox.to_array()
                )));
            }
            gt.bbox = gt.bbox.clip(img.width, img.height).ok_or_else(|| {
                Error::Parse(format!("annotation {} lies outside image {}", gt.id, gt.image_id))
            })?;
            gts.push(gt);
        }
        Ok(Dataset { images, ground_truths: gts, categories, image_index })
    }

    pub fn has_image(&self, id: ImageId) -> bool {
        self.image_index.contains_key(&id)
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageInfo> {
        self.image_index.get(&id).map(|i| &self.images[*i])
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        self.images.iter().map(|i| i.id).collect()
    }

    pub fn gts_by_image(&self) -> BTreeMap<ImageId, Vec<GroundTruthRecord>> {
        let mut out: BTreeMap<ImageId, Vec<GroundTruthRecord>> = BTreeMap::new();
        for gt in &self.ground_truths {
            out.entry(gt.image_id).or_default().push(gt.clone());
        }
        out
    }

    pub fn gt_counts(&self) -> BTreeMap<CategoryId, u64> {
        let mut out = BTreeMap::new();
        for gt in &self.ground_truths {
            *out.entry(gt.category_id).or_insert(0) += 1;
        }
        out
    }

    /// Category ids from the category table, or from the annotations when the table is empty.
    pub fn category_ids(&self) -> Vec<CategoryId> {
        if self.categories.is_empty() {
            self.gt_counts().into_keys().collect()
        } else {
            self.categories.iter().map(|c| c.0).collect()
        }
    }

    pub fn to_coco_json(&self) -> serde_json::Value {
        let images: Vec<_> = self
            .images
            .iter()
            .map(|i| serde_json::json!({"id": i.id, "width": i.width, "height": i.height}))
            .collect();
        let annotations: Vec<_> = self
            .ground_truths
            .iter()
            .map(|g| {
                serde_json::json!({
                    "id": g.id,
                    "image_id": g.image_id,
                    "category_id": g.category_id,
                    "bbox": g.bbox.to_array(),
                    "area": g.bbox.area(),
                    "iscrowd": if g.iscrowd { 1 } else { 0 },
                })
            })
            .collect();
        let categories: Vec<_> = self
            .categories
            .iter()
            .map(|(id, name)| serde_json::json!({"id": id, "name": name}))
            .collect();
        serde_json::json!({"images": images, "annotations": annotations, "categories": categories})
    }
}

/// Summary of what was filtered while loading an annotation file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub images: usize,
    pub annotations_loaded: usize,
    pub crowd_dropped: usize,
}

#[derive(Deserialize)]
struct CocoImage {
    id: ImageId,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: ImageId,
    category_id: CategoryId,
    bbox: [f64; 4],
    #[serde(default, deserialize_with = "flag")]
    iscrowd: bool,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: CategoryId,
    #[serde(default)]
    name: String,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoResult {
    image_id: ImageId,
    category_id: CategoryId,
    bbox: [f64; 4],
    score: f64,
}

fn flag<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        B(bool),
        N(i64),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::B(b) => b,
        Flag::N(n) => n != 0,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_ground_truth(text: &str) -> Result<(Dataset, LoadReport)> {
    let file: CocoFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("annotation file: {e}")))?;
    let images: Vec<ImageInfo> = file
        .images
        .iter()
        .map(|i| ImageInfo { id: i.id, width: i.width, height: i.height })
        .collect();
    let mut report = LoadReport { images: images.len(), ..Default::default() };
    let mut gts = Vec::new();
    for a in file.annotations {
        if a.iscrowd {
            report.crowd_dropped += 1;
            continue;
        }
        gts.push(GroundTruthRecord {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: BBox::from_array(a.bbox),
            iscrowd: false,
        });
    }
    report.annotations_loaded = gts.len();
    let categories = file.categories.into_iter().map(|c| (c.id, c.name)).collect();
    Ok((Dataset::new(images, gts, categories)?, report))
}

/// Loads a COCO annotation file. Crowd annotations are dropped and counted.
pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    parse_ground_truth(&read(path)?).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>> {
    let raw: Vec<CocoResult> =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("detection file: {e}")))?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        if !(r.score >= -1e-9 && r.score <= 1.0 + 1e-9) {
            return Err(Error::Parse(format!("detection #{i}: score {} outside [0, 1]", r.score)));
        }
        let bbox = BBox::from_array(r.bbox);
        if !bbox.is_valid() {
            return Err(Error::Parse(format!("detection #{i}: non-positive box dimensions")));
        }
        out.push(DetectionRecord {
            image_id: r.image_id,
            category_id: r.category_id,
            bbox,
            score: clamp_score(r.score),
        });
    }
    // Stable, so input order within an image is kept.
    out.sort_by_key(|d| d.image_id);
    Ok(out)
}

/// Loads a COCO results file (array of `{image_id, category_id, bbox, score}`).
pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    parse_detections(&read(path)?).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn detections_to_json(dets: &[DetectionRecord]) -> serde_json::Value {
    serde_json::Value::Array(
        dets.iter()
            .map(|d| {
                serde_json::json!({
                    "image_id": d.image_id,
                    "category_id": d.category_id,
                    "bbox": d.bbox.to_array(),
                    "score": d.score,
                })
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Corruption

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Jitter,
    LabelNoise,
    Deletion,
    FakeBoxes,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::Jitter,
        CorruptionKind::LabelNoise,
        CorruptionKind::Deletion,
        CorruptionKind::FakeBoxes,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "jitter" => Ok(CorruptionKind::Jitter),
            "label_noise" | "labels" => Ok(CorruptionKind::LabelNoise),
            "deletion" | "delete" => Ok(CorruptionKind::Deletion),
            "fake_boxes" | "fakes" => Ok(CorruptionKind::FakeBoxes),
            _ => Err(Error::Config(format!("unknown corruption type '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub probability: f64,
    pub enabled: BTreeSet<CorruptionKind>,
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn new(probability: f64, enabled: impl IntoIterator<Item = CorruptionKind>, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Config(format!("corruption probability {probability} not in [0, 1]")));
        }
        Ok(CorruptionConfig { probability, enabled: enabled.into_iter().collect(), seed })
    }

    pub fn all(probability: f64, seed: u64) -> Result<Self> {
        Self::new(probability, CorruptionKind::ALL, seed)
    }
}

pub const JITTER_RANGE: (f64, f64) = (0.5, 1.5);
pub const JITTER_MIN_DEVIATION: f64 = 0.05;
pub const FRACTION_RANGE: (f64, f64) = (0.2, 0.5);
pub const FAKE_SIZE_RANGE: (f64, f64) = (0.05, 0.2);
pub const FAKE_MAX_IOU: f64 = 0.1;
pub const FAKE_CAP: usize = 20;
pub const FAKE_MAX_ATTEMPTS: usize = 50;

/// Scale factor in `[0.5, 1.5]` at least 5% away from 1.
pub fn draw_jitter_factor(rng: &mut impl Rng) -> f64 {
    loop {
        let s = rng.random_range(JITTER_RANGE.0..=JITTER_RANGE.1);
        if (s - 1.0).abs() >= JITTER_MIN_DEVIATION {
            return s;
        }
    }
}

fn draw_fraction(rng: &mut impl Rng) -> f64 {
    rng.random_range(FRACTION_RANGE.0..=FRACTION_RANGE.1)
}

/// Rescales width and height about the box center, then clips to the image.
pub fn corrupt_jitter(gt: &GroundTruthRecord, image: (f64, f64), rng: &mut impl Rng) -> GroundTruthRecord {
    let sw = draw_jitter_factor(rng);
    let sh = draw_jitter_factor(rng);
    let (cx, cy) = gt.bbox.center();
    let (w, h) = (gt.bbox.w * sw, gt.bbox.h * sh);
    let scaled = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h);
    let bbox = scaled.clip(image.0, image.1).unwrap_or(gt.bbox);
    GroundTruthRecord { bbox, ..gt.clone() }
}

/// Number of instances touched by label noise or deletion for `n` boxes.
fn affected_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((n as f64 * fraction).floor() as usize).clamp(1, n)
    }
}

/// Relabels a random 20-50% subset (at least one) with a different category.
pub fn corrupt_labels(
    gts: &[GroundTruthRecord],
    categories: &[CategoryId],
    rng: &mut impl Rng,
) -> Vec<GroundTruthRecord> {
    if gts.is_empty() {
        return Vec::new();
    }
    let distinct: BTreeSet<CategoryId> = categories.iter().copied().collect();
    if distinct.len() < 2 {
        log::warn!("label noise skipped: fewer than two categories");
        return gts.to_vec();
    }
    let k = affected_count(gts.len(), draw_fraction(rng));
    let picked = rand::seq::index::sample(rng, gts.len(), k);
    let mut out = gts.to_vec();
    for i in picked {
        let old = out[i].category_id;
        let choices: Vec<CategoryId> = distinct.iter().copied().filter(|c| *c != old).collect();
        out[i].category_id = choices[rng.random_range(0..choices.len())];
    }
    out
}

/// Removes a random 20-50% of the boxes (at least one).
pub fn corrupt_delete(gts: &[GroundTruthRecord], rng: &mut impl Rng) -> Vec<GroundTruthRecord> {
    corrupt_delete_fraction(gts, draw_fraction(rng), rng)
}

pub fn corrupt_delete_fraction(
    gts: &[GroundTruthRecord],
    fraction: f64,
    rng: &mut impl Rng,
) -> Vec<GroundTruthRecord> {
    if gts.is_empty() {
        return Vec::new();
    }
    let k = affected_count(gts.len(), fraction);
    let drop: HashSet<usize> = rand::seq::index::sample(rng, gts.len(), k).into_iter().collect();
    gts.iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, g)| g.clone())
        .collect()
}

/// Adds `min(20, floor(n * r))` fake boxes, each with IoU < 0.1 against every
/// box already present. Fake ids are 0 until the dataset is renumbered.
pub fn corrupt_fake_boxes(
    gts: &[GroundTruthRecord],
    image: (f64, f64),
    image_id: ImageId,
    categories: &[CategoryId],
    rng: &mut impl Rng,
) -> Vec<GroundTruthRecord> {
    let r = draw_fraction(rng);
    corrupt_fake_boxes_fraction(gts, image, image_id, categories, r, rng)
}

pub fn corrupt_fake_boxes_fraction(
    gts: &[GroundTruthRecord],
    image: (f64, f64),
    image_id: ImageId,
    categories: &[CategoryId],
    fraction: f64,
    rng: &mut impl Rng,
) -> Vec<GroundTruthRecord> {
    let (width, height) = image;
    let m = ((gts.len() as f64 * fraction).floor() as usize).min(FAKE_CAP);
    let mut out = gts.to_vec();
    if m == 0 || categories.is_empty() {
        return out;
    }
    let mut occupied: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    for _ in 0..m {
        for _ in 0..FAKE_MAX_ATTEMPTS {
            let w = rng.random_range(FAKE_SIZE_RANGE.0 * width..=FAKE_SIZE_RANGE.1 * width);
            let h = rng.random_range(FAKE_SIZE_RANGE.0 * height..=FAKE_SIZE_RANGE.1 * height);
            let x = rng.random_range(0.0..=(width - w));
            let y = rng.random_range(0.0..=(height - h));
            let cand = BBox::new(x, y, w, h);
            if occupied.iter().all(|b| iou(&cand, b) < FAKE_MAX_IOU) {
                occupied.push(cand);
                out.push(GroundTruthRecord {
                    id: 0,
                    image_id,
                    category_id: categories[rng.random_range(0..categories.len())],
                    bbox: cand,
                    iscrowd: false,
                });
                break;
            }
        }
    }
    out
}

/// Per-image RNG stream derived from `(seed, image_id)`.
pub fn image_rng(seed: u64, image_id: ImageId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng
}

/// Result of [`corrupt_dataset`]: the new dataset and which images were picked.
#[derive(Debug, Clone)]
pub struct CorruptionOutcome {
    pub dataset: Dataset,
    pub corrupted_image_ids: Vec<ImageId>,
}

/// Manifest written next to a corrupted annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub probability: f64,
    pub seed: u64,
    pub enabled: Vec<CorruptionKind>,
    pub corrupted_image_ids: Vec<ImageId>,
}

impl CorruptionOutcome {
    pub fn manifest(&self, cfg: &CorruptionConfig) -> CorruptionManifest {
        CorruptionManifest {
            probability: cfg.probability,
            seed: cfg.seed,
            enabled: cfg.enabled.iter().copied().collect(),
            corrupted_image_ids: self.corrupted_image_ids.clone(),
        }
    }
}

/// Selects each image with probability `p` and applies every enabled
/// corruption in the order jitter, labels, deletion, fakes. Annotation ids
/// are renumbered `1..=n` in image order.
pub fn corrupt_dataset(ds: &Dataset, cfg: &CorruptionConfig) -> Result<CorruptionOutcome> {
    if !(0.0..=1.0).contains(&cfg.probability) {
        return Err(Error::Config(format!("corruption probability {} not in [0, 1]", cfg.probability)));
    }
    let categories = ds.category_ids();
    let by_image = ds.gts_by_image();
    let empty = Vec::new();
    let results: Vec<(ImageId, bool, Vec<GroundTruthRecord>)> = ds
        .images
        .par_iter()
        .map(|img| {
            let gts = by_image.get(&img.id).unwrap_or(&empty);
            let mut rng = image_rng(cfg.seed, img.id);
            let selected = rng.random::<f64>() < cfg.probability;
            if !selected {
                return (img.id, false, gts.clone());
            }
            let dims = (img.width, img.height);
            let mut cur = gts.clone();
            for kind in &cfg.enabled {
                cur = match kind {
                    CorruptionKind::Jitter => cur.iter().map(|g| corrupt_jitter(g, dims, &mut rng)).collect(),
                    CorruptionKind::LabelNoise => corrupt_labels(&cur, &categories, &mut rng),
                    CorruptionKind::Deletion => corrupt_delete(&cur, &mut rng),
                    CorruptionKind::FakeBoxes => {
                        corrupt_fake_boxes(&cur, dims, img.id, &categories, &mut rng)
                    }
                };
            }
            (img.id, true, cur)
        })
        .collect();

    let mut next_id = 1u64;
    let mut gts = Vec::new();
    let mut corrupted = Vec::new();
    for (id, selected, list) in results {
        if selected {
            corrupted.push(id);
        }
        for mut g in list {
            g.id = next_id;
            next_id += 1;
            gts.push(g);
        }
    }
    let dataset = Dataset::new(ds.images.clone(), gts, ds.categories.clone())?;
    Ok(CorruptionOutcome { dataset, corrupted_image_ids: corrupted })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(id: u64, c: CategoryId, b: [f64; 4]) -> GroundTruthRecord {
        GroundTruthRecord { id, image_id: 1, category_id: c, bbox: BBox::from_array(b), iscrowd: false }
    }

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 80}],
        "annotations": [{"id": 5, "image_id": 1, "category_id": 3, "bbox": [10, 10, 20, 20], "iscrowd": 0}],
        "categories": [{"id": 3, "name": "car"}]
    }"#;

    #[test]
    fn parse_minimal_file() {
        let (ds, report) = parse_ground_truth(MINIMAL).unwrap();
        assert_eq!(ds.ground_truths.len(), 1);
        assert_eq!(report.crowd_dropped, 0);
        assert_eq!(ds.ground_truths[0].bbox, BBox::new(10., 10., 20., 20.));
    }

    #[test]
    fn crowd_is_dropped_and_reported() {
        let text = MINIMAL.replace("\"iscrowd\": 0", "\"iscrowd\": 1");
        let (ds, report) = parse_ground_truth(&text).unwrap();
        assert!(ds.ground_truths.is_empty());
        assert_eq!(report.crowd_dropped, 1);
    }

    #[test]
    fn zero_width_names_annotation() {
        let text = MINIMAL.replace("[10, 10, 20, 20]", "[10, 10, 0, 20]");
        let err = parse_ground_truth(&text).unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("annotation 5")), "{err}");
    }

    #[test]
    fn missing_key_is_parse_error() {
        let text = MINIMAL.replace("\"bbox\": [10, 10, 20, 20],", "");
        assert!(matches!(parse_ground_truth(&text), Err(Error::Parse(_))));
        assert!(matches!(parse_ground_truth("{nope"), Err(Error::Parse(_))));
    }

    #[test]
    fn boxes_are_clipped_to_image() {
        let text = MINIMAL.replace("[10, 10, 20, 20]", "[90, 70, 20, 20]");
        let (ds, _) = parse_ground_truth(&text).unwrap();
        assert_eq!(ds.ground_truths[0].bbox, BBox::new(90., 70., 10., 10.));
    }

    #[test]
    fn detections_parse_and_clamp() {
        let d = parse_detections(r#"[{"image_id":1,"category_id":3,"bbox":[0,0,10,10],"score":0.9}]"#).unwrap();
        assert_eq!(d.len(), 1);
        assert!(parse_detections("[]").unwrap().is_empty());
        let d = parse_detections(r#"[{"image_id":1,"category_id":3,"bbox":[0,0,10,10],"score":1.0}]"#).unwrap();
        assert_eq!(d[0].score, 1.0 - 1e-6);
        let d = parse_detections(r#"[{"image_id":1,"category_id":3,"bbox":[0,0,10,10],"score":0.0}]"#).unwrap();
        assert_eq!(d[0].score, 1e-6);
        assert!(parse_detections(r#"[{"image_id":1,"category_id":3,"bbox":[0,0,10,10],"score":1.1}]"#).is_err());
    }

    #[test]
    fn detections_grouped_by_image_in_input_order() {
        let d = parse_detections(
            r#"[{"image_id":2,"category_id":1,"bbox":[0,0,1,1],"score":0.3},
                {"image_id":1,"category_id":1,"bbox":[0,0,1,1],"score":0.2},
                {"image_id":2,"category_id":1,"bbox":[0,0,1,1],"score":0.8}]"#,
        )
        .unwrap();
        let v: Vec<(u64, f64)> = d.iter().map(|x| (x.image_id, x.score)).collect();
        assert_eq!(v, vec![(1, 0.2), (2, 0.3), (2, 0.8)]);
    }

    #[test]
    fn jitter_bounds_and_center() {
        let mut rng = image_rng(3, 1);
        let g = gt(1, 1, [100., 100., 40., 20.]);
        for _ in 0..2000 {
            let j = corrupt_jitter(&g, (1000., 1000.), &mut rng);
            let (sw, sh) = (j.bbox.w / 40.0, j.bbox.h / 20.0);
            assert!((0.5 - 1e-12..=1.5 + 1e-12).contains(&sw));
            assert!((0.5 - 1e-12..=1.5 + 1e-12).contains(&sh));
            assert!((sw - 1.0).abs() >= 0.05 - 1e-12);
            assert!((sh - 1.0).abs() >= 0.05 - 1e-12);
            let (cx, cy) = j.bbox.center();
            assert!((cx - 120.0).abs() < 1e-9 && (cy - 110.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jitter_at_border_is_clipped() {
        let mut rng = image_rng(0, 0);
        let g = gt(1, 1, [0., 0., 50., 50.]);
        for _ in 0..200 {
            let j = corrupt_jitter(&g, (50., 50.), &mut rng);
            assert!(j.bbox.x >= 0.0 && j.bbox.y >= 0.0);
            assert!(j.bbox.x + j.bbox.w <= 50.0 + 1e-9 && j.bbox.y + j.bbox.h <= 50.0 + 1e-9);
        }
    }

    #[test]
    fn label_noise_counts() {
        let gts: Vec<_> = (0..10).map(|i| gt(i, 1, [0., 0., 5., 5.])).collect();
        for seed in 0..200 {
            let mut rng = image_rng(seed, 7);
            let out = corrupt_labels(&gts, &[1, 2, 3], &mut rng);
            let changed = out.iter().filter(|g| g.category_id != 1).count();
            assert!((2..=5).contains(&changed), "{changed}");
        }
        let one = vec![gt(0, 2, [0., 0., 5., 5.])];
        let out = corrupt_labels(&one, &[1, 2], &mut image_rng(0, 0));
        assert_eq!(out[0].category_id, 1);
        let out = corrupt_labels(&gts, &[1], &mut image_rng(0, 0));
        assert_eq!(out, gts);
    }

    #[test]
    fn deletion_counts() {
        let gts: Vec<_> = (0..10).map(|i| gt(i, 1, [0., 0., 5., 5.])).collect();
        for seed in 0..200 {
            let out = corrupt_delete(&gts, &mut image_rng(seed, 1));
            assert!((5..=8).contains(&out.len()));
        }
        assert!(corrupt_delete(&[], &mut image_rng(0, 0)).is_empty());
        let two = &gts[..2];
        assert_eq!(corrupt_delete_fraction(two, 0.5, &mut image_rng(0, 0)).len(), 1);
    }

    #[test]
    fn fake_boxes_respect_iou_and_cap() {
        let gts: Vec<_> = (0..10).map(|i| gt(i, 1, [i as f64 * 20.0, 0., 15., 15.])).collect();
        let out = corrupt_fake_boxes_fraction(&gts, (400., 400.), 1, &[1, 2], 0.3, &mut image_rng(1, 1));
        assert_eq!(out.len(), 13);
        for f in &out[10..] {
            assert!(gts.iter().all(|g| iou(&f.bbox, &g.bbox) < 0.1));
            assert!(f.bbox.w >= 20.0 - 1e-9 && f.bbox.w <= 80.0 + 1e-9);
        }
        let many: Vec<_> = (0..100).map(|i| gt(i, 1, [(i % 10) as f64, 0., 1., 1.])).collect();
        let out = corrupt_fake_boxes_fraction(&many, (1000., 1000.), 1, &[1], 0.5, &mut image_rng(1, 1));
        assert_eq!(out.len() - 100, 20);
        assert_eq!(corrupt_fake_boxes(&[], (100., 100.), 1, &[1], &mut image_rng(0, 0)).len(), 0);
    }

    fn synthetic(n: u64) -> Dataset {
        let images = (1..=n).map(|id| ImageInfo { id, width: 200., height: 200. }).collect();
        let gts = (1..=n)
            .flat_map(|id| {
                (0..4).map(move |k| GroundTruthRecord {
                    id: id * 10 + k,
                    image_id: id,
                    category_id: 1 + k % 3,
                    bbox: BBox::new(10.0 + 45.0 * k as f64, 20.0, 30.0, 30.0),
                    iscrowd: false,
                })
            })
            .collect();
        Dataset::new(images, gts, vec![(1, "a".into()), (2, "b".into()), (3, "c".into())]).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let ds = synthetic(20);
        let out = corrupt_dataset(&ds, &CorruptionConfig::all(0.0, 1).unwrap()).unwrap();
        assert!(out.corrupted_image_ids.is_empty());
        let strip = |d: &Dataset| -> Vec<_> { d.ground_truths.iter().map(|g| (g.image_id, g.category_id, g.bbox.to_array())).collect() };
        assert_eq!(strip(&out.dataset), strip(&ds));
    }

    #[test]
    fn full_deletion_touches_every_image() {
        let ds = synthetic(50);
        let cfg = CorruptionConfig::new(1.0, [CorruptionKind::Deletion], 9).unwrap();
        let out = corrupt_dataset(&ds, &cfg).unwrap();
        let before = ds.gts_by_image();
        let after = out.dataset.gts_by_image();
        for (id, g) in before {
            assert!(after.get(&id).map_or(0, |v| v.len()) < g.len());
        }
    }

    #[test]
    fn corruption_is_deterministic_and_rate_matches() {
        let ds = synthetic(1000);
        let cfg = CorruptionConfig::all(0.4, 42).unwrap();
        let a = corrupt_dataset(&ds, &cfg).unwrap();
        let b = corrupt_dataset(&ds, &cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let frac = a.corrupted_image_ids.len() as f64 / 1000.0;
        assert!((frac - 0.4).abs() <= 0.05, "{frac}");
        let full = corrupt_dataset(&ds, &CorruptionConfig::all(1.0, 42).unwrap()).unwrap();
        assert_eq!(full.corrupted_image_ids.len(), 1000);
    }

    #[test]
    fn corrupted_file_round_trips() {
        let ds = synthetic(5);
        let out = corrupt_dataset(&ds, &CorruptionConfig::all(1.0, 3).unwrap()).unwrap();
        let text = out.dataset.to_coco_json().to_string();
        let (back, _) = parse_ground_truth(&text).unwrap();
        assert_eq!(back.ground_truths.len(), out.dataset.ground_truths.len());
    }
}
