//! Seeded synthetic datasets and detector dumps for tests, benches and demos.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{image_rng, Dataset, ImageInfo};
use crate::model::{clamp_score, BBox, CategoryId, DetectionRecord, GroundTruthRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub images: usize,
    pub classes: u64,
    pub width: f64,
    pub height: f64,
    /// Inclusive range of ground-truth boxes per image.
    pub boxes_per_image: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            images: 100,
            classes: 5,
            width: 640.0,
            height: 480.0,
            boxes_per_image: (1, 6),
            seed: 0,
        }
    }
}

fn random_box(rng: &mut impl Rng, w: f64, h: f64, frac: (f64, f64)) -> BBox {
    let bw = w * rng.random_range(frac.0..frac.1);
    let bh = h * rng.random_range(frac.0..frac.1);
    BBox::new(rng.random_range(0.0..w - bw), rng.random_range(0.0..h - bh), bw, bh)
}

/// Image ids `1..=images`, category ids `1..=classes`.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.boxes_per_image.0 > cfg.boxes_per_image.1 {
        return Err(Error::Config("need at least one class and a valid box range".into()));
    }
    let mut images = Vec::with_capacity(cfg.images);
    let mut gts = Vec::new();
    let mut next = 1;
    for id in 1..=cfg.images as u64 {
        images.push(ImageInfo { id, width: cfg.width, height: cfg.height });
        let mut rng = image_rng(cfg.seed, id);
        let n = rng.random_range(cfg.boxes_per_image.0..=cfg.boxes_per_image.1);
        for _ in 0..n {
            gts.push(GroundTruthRecord {
                id: next,
                image_id: id,
                category_id: rng.random_range(1..=cfg.classes),
                bbox: random_box(&mut rng, cfg.width, cfg.height, (0.1, 0.4)),
                iscrowd: false,
            });
            next += 1;
        }
    }
    let categories = (1..=cfg.classes).map(|c| (c, format!("class{c}"))).collect();
    Dataset::new(images, gts, categories)
}

/// How a simulated detector perturbs the ground truth it sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpConfig {
    pub miss_rate: f64,
    /// Mean number of spurious boxes per image.
    pub fp_per_image: f64,
    /// Coordinate noise as a fraction of box size.
    pub box_noise: f64,
    pub label_flip: f64,
    /// Beta shapes of matched and spurious detection scores.
    pub tp_score: (f64, f64),
    pub fp_score: (f64, f64),
    pub seed: u64,
}

impl DumpConfig {
    /// Finds every box exactly with high confidence.
    pub fn oracle(seed: u64) -> Self {
        DumpConfig {
            miss_rate: 0.0,
            fp_per_image: 0.0,
            box_noise: 0.0,
            label_flip: 0.0,
            tp_score: (20.0, 1.0),
            fp_score: (1.0, 1.0),
            seed,
        }
    }

    pub fn noisy(seed: u64) -> Self {
        DumpConfig {
            miss_rate: 0.3,
            fp_per_image: 2.0,
            box_noise: 0.15,
            label_flip: 0.1,
            tp_score: (3.0, 2.0),
            fp_score: (2.0, 3.0),
            seed,
        }
    }
}

/// Detections of a simulated detector run over `truth`.
pub fn detection_dump(truth: &Dataset, cfg: &DumpConfig) -> Result<Vec<DetectionRecord>> {
    let beta = |(a, b): (f64, f64)| Beta::new(a, b).map_err(|e| Error::Config(format!("beta({a}, {b}): {e}")));
    let tp_score = beta(cfg.tp_score)?;
    let fp_score = beta(cfg.fp_score)?;
    let categories: Vec<CategoryId> = truth.category_ids();
    let by_image = truth.gts_by_image();
    let mut out = Vec::new();
    for img in &truth.images {
        // Stream offset keeps dump draws apart from dataset draws under equal seeds.
        let mut rng = image_rng(cfg.seed ^ 0x5eed_d0d0, img.id);
        for gt in by_image.get(&img.id).into_iter().flatten() {
            if rng.random::<f64>() < cfg.miss_rate {
                continue;
            }
            let b = gt.bbox;
            let mut noise = |scale: f64| scale * cfg.box_noise * rng.random_range(-1.0..=1.0);
            let jittered = BBox::new(b.x + noise(b.w), b.y + noise(b.h), b.w + noise(b.w), b.h + noise(b.h));
            let Some(bbox) = jittered.is_valid().then_some(jittered).and_then(|bb| bb.clip(img.width, img.height)) else {
                continue;
            };
            let mut category_id = gt.category_id;
            if categories.len() > 1 && rng.random::<f64>() < cfg.label_flip {
                while category_id == gt.category_id {
                    category_id = categories[rng.random_range(0..categories.len())];
                }
            }
            out.push(DetectionRecord { image_id: img.id, category_id, bbox, score: clamp_score(tp_score.sample(&mut rng)) });
        }
        let spurious = if cfg.fp_per_image > 0.0 {
            rng.random_range(0..=(2.0 * cfg.fp_per_image).round() as usize)
        } else {
            0
        };
        for _ in 0..spurious {
            out.push(DetectionRecord {
                image_id: img.id,
                category_id: categories[rng.random_range(0..categories.len())],
                bbox: random_box(&mut rng, img.width, img.height, (0.05, 0.3)),
                score: clamp_score(fp_score.sample(&mut rng)),
            });
        }
    }
    Ok(out)
}
