//! Exact non-interpolated AP/mAP over finite detection sets, and the
//! brute-force marginal-mAP oracle built on it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CategoryId, MatchedDataset, MatchedImage};

/// Indices in descending score order, ties by ascending index.
fn rank(items: &[(f64, bool)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| items[j].0.total_cmp(&items[i].0).then(i.cmp(&j)));
    order
}

/// AP of TP flags that are already in rank order.
pub fn ap_ranked(flags: impl IntoIterator<Item = bool>, gt_count: u64) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut tp = 0u64;
    let mut seen = 0u64;
    let mut acc = 0.0;
    for is_tp in flags {
        seen += 1;
        if is_tp {
            tp += 1;
            acc += tp as f64 / seen as f64;
        }
    }
    Some(acc / gt_count as f64)
}

/// Non-interpolated AP: mean over ground truths of the precision at the rank
/// where each one is recalled (0 for missed ones). `None` when `gt_count == 0`.
pub fn ap_single(items: &[(f64, bool)], gt_count: u64) -> Option<f64> {
    ap_ranked(rank(items).into_iter().map(|i| items[i].1), gt_count)
}

/// COCO-style 101-point interpolated AP.
pub fn ap_interpolated_101(items: &[(f64, bool)], gt_count: u64) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let order = rank(items);
    let mut precision = Vec::with_capacity(items.len());
    let mut recall = Vec::with_capacity(items.len());
    let mut tp = 0u64;
    for (n, i) in order.iter().enumerate() {
        if items[*i].1 {
            tp += 1;
        }
        precision.push(tp as f64 / (n + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut acc = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|x| *x < target - 1e-12);
        if idx < precision.len() {
            acc += precision[idx];
        }
    }
    Some(acc / 101.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellAp {
    pub category_id: CategoryId,
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub cells: Vec<CellAp>,
    pub map: f64,
    pub evaluated_classes: usize,
}

/// Detections of one cell across images, ordered by (image_id, input index)
/// so that the stable score sort breaks ties the same way everywhere.
fn cell_items<'a>(
    images: impl Iterator<Item = &'a MatchedImage>,
    category: CategoryId,
    tau_index: usize,
) -> Vec<(f64, bool)> {
    images
        .flat_map(|img| img.detections.iter())
        .filter(|d| d.category_id == category)
        .map(|d| (d.score, d.tp_flags[tau_index]))
        .collect()
}

/// mAP over classes with positive ground-truth count and every grid threshold.
pub fn map_exact(ds: &MatchedDataset) -> ApReport {
    let gt = ds.gt_counts();
    let mut cells = Vec::new();
    for (c, n) in gt.iter().filter(|(_, n)| **n > 0) {
        for (k, tau) in ds.grid.thresholds().iter().enumerate() {
            let items = cell_items(ds.images.values(), *c, k);
            let ap = ap_single(&items, *n).expect("positive gt count");
            cells.push(CellAp { category_id: *c, threshold: *tau, ap });
        }
    }
    let evaluated = gt.values().filter(|n| **n > 0).count();
    let map = if cells.is_empty() {
        0.0
    } else {
        cells.iter().map(|c| c.ap).sum::<f64>() / cells.len() as f64
    };
    ApReport { cells, map, evaluated_classes: evaluated }
}

/// `mAP(pool + x) - mAP(pool)` by two full evaluations. Inserting `x` adds
/// its detections to the ranked lists and its ground truths to the class totals.
pub fn exact_delta_map(pool: &MatchedDataset, x: &MatchedImage) -> Result<f64> {
    if pool.images.contains_key(&x.image_id) {
        return Err(Error::Structure(format!("image {} is already in the pool", x.image_id)));
    }
    let before = map_exact(pool).map;
    let mut grown = pool.clone();
    grown.insert(x.clone())?;
    Ok(map_exact(&grown).map - before)
}

/// Per-cell AP change from inserting `x`, keyed by (class, threshold index).
/// Only classes touched by `x` appear.
pub fn exact_delta_cells(
    pool: &MatchedDataset,
    x: &MatchedImage,
) -> Result<BTreeMap<(CategoryId, usize), f64>> {
    if pool.images.contains_key(&x.image_id) {
        return Err(Error::Structure(format!("image {} is already in the pool", x.image_id)));
    }
    let gt_before = pool.gt_counts();
    let touched: BTreeSet<CategoryId> = x
        .detections
        .iter()
        .map(|d| d.category_id)
        .chain(x.gt_counts.keys().copied())
        .collect();
    let mut out = BTreeMap::new();
    for c in touched {
        let n0 = gt_before.get(&c).copied().unwrap_or(0);
        let n1 = n0 + x.gt_counts.get(&c).copied().unwrap_or(0);
        for k in 0..pool.grid.len() {
            let before = cell_items(pool.images.values(), c, k);
            let after = {
                let mut imgs: Vec<&MatchedImage> = pool.images.values().collect();
                let pos = imgs.partition_point(|i| i.image_id < x.image_id);
                imgs.insert(pos, x);
                cell_items(imgs.into_iter(), c, k)
            };
            let a0 = ap_single(&before, n0);
            let a1 = ap_single(&after, n1);
            if let (Some(a0), Some(a1)) = (a0, a1) {
                out.insert((c, k), a1 - a0);
            } else if let (None, Some(a1)) = (a0, a1) {
                out.insert((c, k), a1);
            }
        }
    }
    Ok(out)
}
