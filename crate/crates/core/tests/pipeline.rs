use std::fs;

use detgain_core::closedform::{image_detgain, UniformClosedForm};
use detgain_core::curation::{CurationConfig, Curator};
use detgain_core::exactap::{exact_delta_map, map_exact};
use detgain_core::ingest::{detections_to_json, load_detections, load_ground_truth};
use detgain_core::matching::match_dataset;
use detgain_core::model::{IouThresholdGrid, MatchedImage, PoolStats};
use detgain_core::synthetic::{detection_dump, generate_dataset, DumpConfig, SyntheticConfig};
use proptest::prelude::*;

fn fixture(images: usize, seed: u64) -> (detgain_core::ingest::Dataset, Vec<detgain_core::model::DetectionRecord>) {
    let ds = generate_dataset(&SyntheticConfig { images, classes: 4, seed, ..Default::default() }).unwrap();
    let dets = detection_dump(&ds, &DumpConfig::noisy(seed + 1)).unwrap();
    (ds, dets)
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, dets) = fixture(30, 3);
    let gt = dir.path().join("gt.json");
    let dp = dir.path().join("dets.json");
    fs::write(&gt, serde_json::to_string(&ds.to_coco_json()).unwrap()).unwrap();
    fs::write(&dp, serde_json::to_string(&detections_to_json(&dets)).unwrap()).unwrap();
    let (back, report) = load_ground_truth(&gt).unwrap();
    assert_eq!(back.to_coco_json(), ds.to_coco_json());
    assert_eq!(report.images, 30);
    assert_eq!(load_detections(&dp).unwrap(), dets);
}

#[test]
fn oracle_dump_scores_perfect_map() {
    let (ds, _) = fixture(40, 5);
    let dets = detection_dump(&ds, &DumpConfig::oracle(9)).unwrap();
    let m = match_dataset(&dets, &ds, &IouThresholdGrid::coco()).unwrap();
    assert_eq!(map_exact(&m).map, 1.0);
}

#[test]
fn exact_delta_is_leave_one_out_difference() {
    let (ds, dets) = fixture(25, 7);
    let full = match_dataset(&dets, &ds, &IouThresholdGrid::coco()).unwrap();
    let full_map = map_exact(&full).map;
    for id in [1u64, 9, 25] {
        let mut pool = full.clone();
        let x = pool.images.remove(&id).unwrap();
        let d = exact_delta_map(&pool, &x).unwrap();
        assert!((d - (full_map - map_exact(&pool).map)).abs() < 1e-12);
    }
}

#[test]
fn estimate_tracks_exact_on_noisy_dump() {
    let (ds, dets) = fixture(150, 21);
    let full = match_dataset(&dets, &ds, &IouThresholdGrid::coco()).unwrap();
    let pairs: Vec<(f64, f64)> = ds
        .image_ids()
        .into_iter()
        .map(|id| {
            let mut pool = full.clone();
            let x = pool.images.remove(&id).unwrap();
            let stats = PoolStats::from_dataset(&pool).unwrap();
            (exact_delta_map(&pool, &x).unwrap(), image_detgain(&x.detections, &stats, &UniformClosedForm))
        })
        .collect();
    // the estimate ignores the ground truth an image brings, so only its
    // ranking against other images is compared
    let rank = |v: Vec<f64>| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
        let mut r = vec![0.0; v.len()];
        for (pos, i) in idx.into_iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let a = rank(pairs.iter().map(|p| p.0).collect());
    let b = rank(pairs.iter().map(|p| p.1).collect());
    let n = a.len() as f64;
    let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    assert!(rho > 0.0, "spearman {rho}");
}

#[test]
fn oracle_teacher_outscores_noisy_student() {
    let (ds, student) = fixture(60, 13);
    let teacher = detection_dump(&ds, &DumpConfig::oracle(2)).unwrap();
    let cur = Curator::new(&ds, &teacher, &student, CurationConfig::default()).unwrap();
    let recs = cur.score_all().unwrap();
    assert_eq!(recs.len(), 60);
    let mean: f64 = recs.values().map(|r| r.learnability).sum::<f64>() / 60.0;
    assert!(mean > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn empty_image_changes_nothing(seed in 0u64..1000) {
        let (ds, dets) = fixture(8, seed);
        let pool = match_dataset(&dets, &ds, &IouThresholdGrid::coco()).unwrap();
        let x = MatchedImage { image_id: 10_000, detections: vec![], gt_counts: Default::default() };
        prop_assert_eq!(exact_delta_map(&pool, &x).unwrap(), 0.0);
        let stats = PoolStats::from_dataset(&pool).unwrap();
        prop_assert_eq!(image_detgain(&x.detections, &stats, &UniformClosedForm), 0.0);
    }

    #[test]
    fn false_positive_only_images_never_help(seed in 0u64..1000) {
        let (ds, dets) = fixture(12, seed);
        let m = match_dataset(&dets, &ds, &IouThresholdGrid::coco()).unwrap();
        let stats = PoolStats::from_dataset(&m).unwrap();
        for img in m.images.values() {
            let fps: Vec<_> = img.detections.iter().filter(|d| d.tp_flags.iter().all(|t| !t)).cloned().collect();
            prop_assert!(image_detgain(&fps, &stats, &UniformClosedForm) <= 0.0);
        }
    }
}
