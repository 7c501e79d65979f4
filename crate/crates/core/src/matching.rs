//! Greedy one-to-one matching of detections to ground truth, recomputed
//! independently for every class and IoU threshold.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::model::{
    BBox, CategoryId, DetectionRecord, GroundTruthRecord, ImageId, IouThresholdGrid,
    MatchedDataset, MatchedDetection, MatchedImage,
};

/// Default cap on detections kept per image.
pub const DEFAULT_MAX_DETS: usize = 100;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices of `dets` in descending score order, ties by ascending index.
pub(crate) fn score_order(dets: &[DetectionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

/// Matches one image. The output keeps the input order of `dets`.
pub fn match_image(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    grid: &IouThresholdGrid,
) -> Vec<MatchedDetection> {
    let order = score_order(dets);
    let mut out: Vec<MatchedDetection> = dets
        .iter()
        .map(|d| MatchedDetection {
            score: d.score,
            category_id: d.category_id,
            iou: 0.0,
            tp_flags: vec![false; grid.len()],
        })
        .collect();

    let classes: BTreeSet<CategoryId> = dets.iter().map(|d| d.category_id).collect();
    for c in classes {
        let class_dets: Vec<usize> = order.iter().copied().filter(|&i| dets[i].category_id == c).collect();
        let class_gts: Vec<&GroundTruthRecord> = gts.iter().filter(|g| g.category_id == c).collect();
        if class_gts.is_empty() {
            continue;
        }
        // ious[d][g]
        let ious: Vec<Vec<f64>> = class_dets
            .iter()
            .map(|&i| class_gts.iter().map(|g| iou(&dets[i].bbox, &g.bbox)).collect())
            .collect();
        for (row, &i) in ious.iter().zip(&class_dets) {
            out[i].iou = row.iter().copied().fold(0.0, f64::max);
        }
        for (k, tau) in grid.thresholds().iter().enumerate() {
            let mut taken = vec![false; class_gts.len()];
            for (row, &i) in ious.iter().zip(&class_dets) {
                let mut best: Option<(usize, f64)> = None;
                for (g, v) in row.iter().enumerate() {
                    if taken[g] || *v < *tau {
                        continue;
                    }
                    if best.is_none_or(|(_, b)| *v > b) {
                        best = Some((g, *v));
                    }
                }
                if let Some((g, _)) = best {
                    taken[g] = true;
                    out[i].tp_flags[k] = true;
                }
            }
        }
    }
    out
}

/// Keeps the `max_dets` highest-scoring detections of each image.
pub fn truncate_per_image(dets: &[DetectionRecord], max_dets: usize) -> Vec<DetectionRecord> {
    let mut by_image: BTreeMap<ImageId, Vec<DetectionRecord>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(d.clone());
    }
    by_image
        .into_values()
        .flat_map(|v| {
            let keep: BTreeSet<usize> = score_order(&v).into_iter().take(max_dets).collect();
            v.into_iter().enumerate().filter(move |(i, _)| keep.contains(i)).map(|(_, d)| d)
        })
        .collect()
}

/// Matches a whole detection dump against a dataset. Every image of the
/// dataset appears in the output, with an empty detection list if needed.
pub fn match_dataset(
    dets: &[DetectionRecord],
    ds: &Dataset,
    grid: &IouThresholdGrid,
) -> Result<MatchedDataset> {
    let mut dets_by_image: BTreeMap<ImageId, Vec<DetectionRecord>> = BTreeMap::new();
    for d in dets {
        if !ds.has_image(d.image_id) {
            return Err(Error::Structure(format!(
                "detection refers to unknown image_id {}",
                d.image_id
            )));
        }
        dets_by_image.entry(d.image_id).or_default().push(d.clone());
    }
    let gts_by_image = ds.gts_by_image();
    let no_dets = Vec::new();
    let no_gts = Vec::new();
    let images: Vec<MatchedImage> = ds
        .images
        .par_iter()
        .map(|img| {
            let d = dets_by_image.get(&img.id).unwrap_or(&no_dets);
            let g = gts_by_image.get(&img.id).unwrap_or(&no_gts);
            let mut gt_counts = BTreeMap::new();
            for gt in g {
                *gt_counts.entry(gt.category_id).or_insert(0) += 1;
            }
            MatchedImage { image_id: img.id, detections: match_image(d, g, grid), gt_counts }
        })
        .collect();
    let mut out = MatchedDataset::new(grid.clone());
    for img in images {
        out.insert(img)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ImageInfo;
    use proptest::prelude::*;

    fn d(c: CategoryId, b: [f64; 4], s: f64) -> DetectionRecord {
        DetectionRecord { image_id: 1, category_id: c, bbox: BBox::from_array(b), score: s }
    }

    fn g(id: u64, c: CategoryId, b: [f64; 4]) -> GroundTruthRecord {
        GroundTruthRecord { id, image_id: 1, category_id: c, bbox: BBox::from_array(b), iscrowd: false }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_detection_is_tp_everywhere() {
        let grid = IouThresholdGrid::coco();
        let m = match_image(&[d(1, [0., 0., 10., 10.], 0.9)], &[g(1, 1, [0., 0., 10., 10.])], &grid);
        assert!(m[0].tp_flags.iter().all(|f| *f));
        assert_eq!(m[0].iou, 1.0);
    }

    #[test]
    fn duplicate_loses_to_higher_score() {
        let grid = IouThresholdGrid::coco();
        let dets = [d(1, [0., 0., 10., 10.], 0.8), d(1, [0., 0., 10., 10.], 0.9)];
        let m = match_image(&dets, &[g(1, 1, [0., 0., 10., 10.])], &grid);
        assert!(m[1].tp_flags.iter().all(|f| *f));
        assert!(m[0].tp_flags.iter().all(|f| !*f));
        assert_eq!(m[0].iou, 1.0);
    }

    #[test]
    fn low_iou_is_fp() {
        let grid = IouThresholdGrid::coco();
        let m = match_image(&[d(1, [5., 0., 10., 10.], 0.9)], &[g(1, 1, [0., 0., 10., 10.])], &grid);
        assert!(m[0].tp_flags.iter().all(|f| !*f));
        assert!((m[0].iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn other_class_gt_is_ignored() {
        let grid = IouThresholdGrid::coco();
        let m = match_image(&[d(2, [0., 0., 10., 10.], 0.9)], &[g(1, 1, [0., 0., 10., 10.])], &grid);
        assert_eq!(m[0].iou, 0.0);
        assert!(m[0].tp_flags.iter().all(|f| !*f));
    }

    #[test]
    fn equal_scores_break_ties_by_index() {
        let grid = IouThresholdGrid::single(0.5).unwrap();
        let dets = [d(1, [0., 0., 10., 10.], 0.7), d(1, [0., 0., 10., 10.], 0.7)];
        let m = match_image(&dets, &[g(1, 1, [0., 0., 10., 10.])], &grid);
        assert_eq!((m[0].tp_flags[0], m[1].tp_flags[0]), (true, false));
    }

    #[test]
    fn greedy_takes_highest_iou_unmatched_gt() {
        let grid = IouThresholdGrid::single(0.3).unwrap();
        let gts = [g(1, 1, [0., 0., 10., 10.]), g(2, 1, [2., 0., 10., 10.])];
        // First detection overlaps gt 2 best; second then gets gt 1.
        let dets = [d(1, [2., 0., 10., 10.], 0.9), d(1, [0., 0., 10., 10.], 0.8)];
        let m = match_image(&dets, &gts, &grid);
        assert!(m[0].tp_flags[0] && m[1].tp_flags[0]);
    }

    fn dataset(n_images: u64) -> Dataset {
        let images = (1..=n_images).map(|id| ImageInfo { id, width: 100.0, height: 100.0 }).collect();
        let mut gts = Vec::new();
        for id in 1..=n_images {
            gts.push(GroundTruthRecord { id: id * 10, image_id: id, category_id: 1, bbox: BBox::new(0., 0., 10., 10.), iscrowd: false });
            gts.push(GroundTruthRecord { id: id * 10 + 1, image_id: id, category_id: 2, bbox: BBox::new(50., 50., 10., 10.), iscrowd: false });
        }
        Dataset::new(images, gts, vec![(1, "a".into()), (2, "b".into())]).unwrap()
    }

    #[test]
    fn match_dataset_counts_and_errors() {
        let ds = dataset(3);
        let grid = IouThresholdGrid::coco();
        let m = match_dataset(&[], &ds, &grid).unwrap();
        assert_eq!(m.gt_counts(), BTreeMap::from([(1, 3), (2, 3)]));
        assert!(m.images.values().all(|i| i.detections.is_empty()));
        let total: u64 = m.gt_counts().values().sum();
        assert_eq!(total as usize, ds.ground_truths.len());

        let bad = DetectionRecord { image_id: 99, category_id: 1, bbox: BBox::new(0., 0., 1., 1.), score: 0.5 };
        assert!(matches!(match_dataset(&[bad], &ds, &grid), Err(Error::Structure(_))));
    }

    #[test]
    fn match_dataset_single_image_equals_match_image() {
        let ds = dataset(1);
        let grid = IouThresholdGrid::coco();
        let dets = vec![d(1, [1., 1., 10., 10.], 0.9), d(2, [0., 0., 5., 5.], 0.4)];
        let m = match_dataset(&dets, &ds, &grid).unwrap();
        let direct = match_image(&dets, &ds.ground_truths, &grid);
        assert_eq!(m.images[&1].detections, direct);
    }

    #[test]
    fn truncation_keeps_top_scores() {
        let mut dets: Vec<_> = (0..5).map(|i| d(1, [0., 0., 1., 1.], 0.1 * (i + 1) as f64)).collect();
        dets[0].image_id = 2;
        let t = truncate_per_image(&dets, 2);
        assert_eq!(t.len(), 3);
        let scores: Vec<f64> = t.iter().filter(|x| x.image_id == 1).map(|x| x.score).collect();
        assert_eq!(scores, vec![0.4, 0.5]);
    }

    fn arb_box() -> impl Strategy<Value = [f64; 4]> {
        (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0).prop_map(|(x, y, w, h)| [x, y, w, h])
    }

    proptest! {
        #[test]
        fn matching_is_one_to_one(
            dets in proptest::collection::vec((0u64..2, arb_box(), 0.01f64..0.99), 0..25),
            gts in proptest::collection::vec((0u64..2, arb_box()), 0..10),
        ) {
            let grid = IouThresholdGrid::coco();
            let dets: Vec<_> = dets.into_iter().map(|(c, b, s)| d(c, b, s)).collect();
            let gts: Vec<_> = gts.into_iter().enumerate().map(|(i, (c, b))| g(i as u64, c, b)).collect();
            let m = match_image(&dets, &gts, &grid);
            for c in 0..2u64 {
                let nd = dets.iter().filter(|x| x.category_id == c).count();
                let ng = gts.iter().filter(|x| x.category_id == c).count();
                for k in 0..grid.len() {
                    let tps = m.iter().filter(|x| x.category_id == c && x.tp_flags[k]).count();
                    prop_assert!(tps <= nd.min(ng));
                }
            }
            for x in &m {
                for (k, f) in x.tp_flags.iter().enumerate() {
                    if *f { prop_assert!(x.iou >= grid.thresholds()[k]); }
                }
            }
        }
    }
}
