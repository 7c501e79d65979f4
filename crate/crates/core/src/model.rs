//! Core domain types: detections, ground truths, matched records, per-cell
//! counts, score densities and precision/recall points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as StatrsBeta, Continuous, ContinuousCDF};

use crate::error::{Error, Result};

pub type ImageId = u64;
pub type CategoryId = u64;

/// Scores are kept inside `[SCORE_EPS, 1 - SCORE_EPS]`.
pub const SCORE_EPS: f64 = 1e-6;

pub fn clamp_score(score: f64) -> f64 {
    score.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Axis-aligned box `(x, y, w, h)` in pixels with a top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    /// Clips to `[0, width] x [0, height]`. Returns `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width);
        let y1 = (self.y + self.h).min(height);
        if x1 > x0 && y1 > y0 {
            Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    /// Annotation id as found in (or assigned to) the annotation file.
    pub id: u64,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub iscrowd: bool,
}

/// Strictly increasing IoU thresholds in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouThresholdGrid {
    thresholds: Vec<f64>,
}

impl IouThresholdGrid {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Config("IoU threshold grid is empty".into()));
        }
        if thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1)".into()));
        }
        if thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("IoU thresholds must be strictly increasing".into()));
        }
        Ok(IouThresholdGrid { thresholds })
    }

    /// `{0.50, 0.55, ..., 0.95}`.
    pub fn coco() -> Self {
        IouThresholdGrid {
            thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }

    pub fn single(tau: f64) -> Result<Self> {
        Self::new(vec![tau])
    }

    /// Inclusive `start:stop:step` range, e.g. `0.5:0.95:0.05`.
    pub fn from_range(start: f64, stop: f64, step: f64) -> Result<Self> {
        if step.is_nan() || step <= 0.0 {
            return Err(Error::Config("IoU grid step must be positive".into()));
        }
        let n = ((stop - start) / step + 1e-9).floor() as i64;
        if n < 0 {
            return Err(Error::Config("IoU grid stop is below start".into()));
        }
        // Rounded to 1e-9 so that 0.5 + 9 * 0.05 prints as 0.95.
        let ts = (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect();
        Self::new(ts)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || Error::Config(format!("bad IoU grid '{text}', expected start:stop:step"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Self::from_range(nums[0], nums[1], nums[2])
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn loosest(&self) -> f64 {
        self.thresholds[0]
    }
}

impl Default for IouThresholdGrid {
    fn default() -> Self {
        Self::coco()
    }
}

/// A detection after one-to-one matching, with TP flags per grid threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedDetection {
    pub score: f64,
    pub category_id: CategoryId,
    /// IoU to the best same-class ground truth, 0 when there is none.
    pub iou: f64,
    pub tp_flags: Vec<bool>,
}

impl MatchedDetection {
    /// Detection that is a TP at every threshold not above `iou`.
    pub fn with_iou(score: f64, category_id: CategoryId, iou: f64, grid: &IouThresholdGrid) -> Self {
        MatchedDetection {
            score,
            category_id,
            iou,
            tp_flags: grid.thresholds().iter().map(|t| iou >= *t).collect(),
        }
    }
}

/// One image's matched detections plus the ground-truth instances it carries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchedImage {
    pub image_id: ImageId,
    pub detections: Vec<MatchedDetection>,
    pub gt_counts: BTreeMap<CategoryId, u64>,
}

impl MatchedImage {
    pub fn new(image_id: ImageId) -> Self {
        MatchedImage { image_id, ..Default::default() }
    }
}

/// Matched detections for a pool of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedDataset {
    pub grid: IouThresholdGrid,
    pub images: BTreeMap<ImageId, MatchedImage>,
}

impl MatchedDataset {
    pub fn new(grid: IouThresholdGrid) -> Self {
        MatchedDataset { grid, images: BTreeMap::new() }
    }

    pub fn insert(&mut self, image: MatchedImage) -> Result<()> {
        for d in &image.detections {
            if d.tp_flags.len() != self.grid.len() {
                return Err(Error::Structure(format!(
                    "image {}: tp flag vector has length {} but the grid has {}",
                    image.image_id,
                    d.tp_flags.len(),
                    self.grid.len()
                )));
            }
        }
        self.images.insert(image.image_id, image);
        Ok(())
    }

    /// Per-class ground-truth totals over all images.
    pub fn gt_counts(&self) -> BTreeMap<CategoryId, u64> {
        let mut out = BTreeMap::new();
        for img in self.images.values() {
            for (c, n) in &img.gt_counts {
                *out.entry(*c).or_insert(0) += n;
            }
        }
        out
    }

    pub fn stats(&self) -> Result<Vec<ClassThresholdStats>> {
        let dets: Vec<&[MatchedDetection]> =
            self.images.values().map(|i| i.detections.as_slice()).collect();
        build_stats(&dets, &self.gt_counts(), &self.grid)
    }
}

/// Counts for one (class, IoU threshold) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholdStats {
    pub category_id: CategoryId,
    pub threshold: f64,
    pub tp_count: u64,
    pub fp_count: u64,
    pub gt_count: u64,
    pub total: u64,
}

impl ClassThresholdStats {
    pub fn new(category_id: CategoryId, threshold: f64, tp: u64, fp: u64, gt: u64) -> Self {
        ClassThresholdStats {
            category_id,
            threshold,
            tp_count: tp,
            fp_count: fp,
            gt_count: gt,
            total: tp + fp,
        }
    }

    /// Bare counts, with no class or threshold attached.
    pub fn counts(tp: u64, fp: u64, gt: u64) -> Self {
        Self::new(0, 0.0, tp, fp, gt)
    }

    pub fn at(self, category_id: CategoryId, threshold: f64) -> Self {
        ClassThresholdStats { category_id, threshold, ..self }
    }

    pub fn with_gt(self, gt_count: u64) -> Self {
        ClassThresholdStats { gt_count, ..self }
    }
}

/// Counts TP/FP flags per (class, threshold) over a set of images.
pub fn build_stats(
    matched: &[&[MatchedDetection]],
    gt_counts: &BTreeMap<CategoryId, u64>,
    grid: &IouThresholdGrid,
) -> Result<Vec<ClassThresholdStats>> {
    let mut cells: BTreeMap<(CategoryId, usize), (u64, u64)> = BTreeMap::new();
    for dets in matched {
        for d in dets.iter() {
            if d.tp_flags.len() != grid.len() {
                return Err(Error::Structure(format!(
                    "tp flag vector has length {} but the grid has {}",
                    d.tp_flags.len(),
                    grid.len()
                )));
            }
            for (k, flag) in d.tp_flags.iter().enumerate() {
                let cell = cells.entry((d.category_id, k)).or_insert((0, 0));
                if *flag {
                    cell.0 += 1;
                } else {
                    cell.1 += 1;
                }
            }
        }
    }
    Ok(cells
        .into_iter()
        .map(|((c, k), (tp, fp))| {
            let gt = gt_counts.get(&c).copied().unwrap_or(0);
            ClassThresholdStats::new(c, grid.thresholds()[k], tp, fp, gt)
        })
        .collect())
}

/// TP:FP proportion used by the fixed-ratio stats surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfRatio {
    pub tp: f64,
    pub fp: f64,
}

impl TfRatio {
    pub fn new(tp: f64, fp: f64) -> Result<Self> {
        if !(tp > 0.0 && fp > 0.0) {
            return Err(Error::Config("TP:FP ratio components must be positive".into()));
        }
        Ok(TfRatio { tp, fp })
    }

    /// Parses `"1:9"`.
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad TP:FP ratio '{s}'")))?;
        let p = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad TP:FP ratio '{s}'")))
        };
        Self::new(p(a)?, p(b)?)
    }
}

impl Default for TfRatio {
    fn default() -> Self {
        TfRatio { tp: 1.0, fp: 9.0 }
    }
}

/// Detections per ground truth assumed by [`fixed_ratio_stats`].
pub const DEFAULT_PREDICTIONS_PER_GT: f64 = 10.0;

/// Surrogate counts with `A = 10 * gt_count` split in the given ratio.
pub fn fixed_ratio_stats(gt_count: u64, ratio: TfRatio) -> ClassThresholdStats {
    fixed_ratio_stats_scaled(gt_count, ratio, DEFAULT_PREDICTIONS_PER_GT)
}

pub fn fixed_ratio_stats_scaled(
    gt_count: u64,
    ratio: TfRatio,
    predictions_per_gt: f64,
) -> ClassThresholdStats {
    let total = (gt_count as f64 * predictions_per_gt).round() as u64;
    let tp = (total as f64 * ratio.tp / (ratio.tp + ratio.fp)).round() as u64;
    ClassThresholdStats::counts(tp.min(total), total - tp.min(total), gt_count)
}

/// Where the per-cell (T, F) counts of a pool come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StatsSource {
    Dataset,
    FixedRatio { tp: f64, fp: f64 },
}

/// Frozen per-(class, threshold) counts of a reference pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolStats {
    pub grid: IouThresholdGrid,
    pub gt_counts: BTreeMap<CategoryId, u64>,
    cells: BTreeMap<(CategoryId, usize), ClassThresholdStats>,
    pub source: StatsSource,
}

impl PoolStats {
    pub fn from_dataset(ds: &MatchedDataset) -> Result<Self> {
        let gt_counts = ds.gt_counts();
        let mut cells = BTreeMap::new();
        for s in ds.stats()? {
            let k = ds
                .grid
                .thresholds()
                .iter()
                .position(|t| *t == s.threshold)
                .expect("threshold comes from the grid");
            cells.insert((s.category_id, k), s);
        }
        Ok(PoolStats { grid: ds.grid.clone(), gt_counts, cells, source: StatsSource::Dataset })
    }

    pub fn fixed_ratio(
        gt_counts: BTreeMap<CategoryId, u64>,
        grid: IouThresholdGrid,
        ratio: TfRatio,
    ) -> Self {
        let mut cells = BTreeMap::new();
        for (c, gt) in &gt_counts {
            for (k, tau) in grid.thresholds().iter().enumerate() {
                cells.insert((*c, k), fixed_ratio_stats(*gt, ratio).at(*c, *tau));
            }
        }
        PoolStats {
            grid,
            gt_counts,
            cells,
            source: StatsSource::FixedRatio { tp: ratio.tp, fp: ratio.fp },
        }
    }

    /// Builds a pool from explicit cells; ground-truth totals are read off the cells.
    pub fn from_cells(grid: IouThresholdGrid, cells: Vec<ClassThresholdStats>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut gt_counts = BTreeMap::new();
        for s in cells {
            let k = grid
                .thresholds()
                .iter()
                .position(|t| (*t - s.threshold).abs() < 1e-9)
                .ok_or_else(|| {
                    Error::Structure(format!("threshold {} is not on the grid", s.threshold))
                })?;
            gt_counts.insert(s.category_id, s.gt_count);
            map.insert((s.category_id, k), s);
        }
        Ok(PoolStats { grid, gt_counts, cells: map, source: StatsSource::Dataset })
    }

    /// Classes with at least one ground truth; these make up the mAP mean.
    pub fn evaluated_classes(&self) -> usize {
        self.gt_counts.values().filter(|n| **n > 0).count()
    }

    /// Counts for one cell, or `None` when the class has no ground truth.
    /// A class with ground truth but no pooled detections gets `T = F = 0`.
    pub fn cell(&self, category_id: CategoryId, tau_index: usize) -> Option<ClassThresholdStats> {
        let gt = self.gt_counts.get(&category_id).copied().unwrap_or(0);
        if gt == 0 {
            return None;
        }
        Some(self.cells.get(&(category_id, tau_index)).copied().unwrap_or_else(|| {
            ClassThresholdStats::new(category_id, self.grid.thresholds()[tau_index], 0, 0, gt)
        }))
    }

    pub fn cells(&self) -> impl Iterator<Item = &ClassThresholdStats> {
        self.cells.values()
    }
}

/// Two-parameter Beta shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaShape {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaShape {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Config(format!("invalid Beta shape ({alpha}, {beta})")));
        }
        Ok(BetaShape { alpha, beta })
    }

    fn dist(&self) -> StatrsBeta {
        StatrsBeta::new(self.alpha, self.beta).expect("validated shape")
    }

    pub fn pdf(&self, u: f64) -> f64 {
        if u <= 0.0 || u >= 1.0 {
            return 0.0;
        }
        self.dist().pdf(u)
    }

    pub fn cdf(&self, u: f64) -> f64 {
        if u <= 0.0 {
            0.0
        } else if u >= 1.0 {
            1.0
        } else {
            self.dist().cdf(u)
        }
    }
}

/// Piecewise-linear CDF through the order statistics of a sample.
///
/// Knots are `(0, 0)`, `(x_(i), i / (n + 1))` and `(1, 1)`; tied samples
/// collapse onto a single knot so the density stays finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    knots: Vec<(f64, f64)>,
}

impl EmpiricalCdf {
    pub fn new(samples: &[f64]) -> Self {
        let mut xs: Vec<f64> = samples.iter().map(|s| clamp_score(*s)).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let mut knots: Vec<(f64, f64)> = vec![(0.0, 0.0)];
        for (i, x) in xs.iter().enumerate() {
            let p = (i + 1) as f64 / (n + 1.0);
            match knots.last_mut() {
                Some(last) if last.0 == *x => last.1 = p,
                _ => knots.push((*x, p)),
            }
        }
        knots.push((1.0, 1.0));
        EmpiricalCdf { knots }
    }

    fn segment(&self, u: f64) -> usize {
        // index i such that knots[i].0 <= u < knots[i+1].0
        let i = self.knots.partition_point(|k| k.0 <= u);
        i.saturating_sub(1).min(self.knots.len() - 2)
    }

    pub fn cdf(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let i = self.segment(u);
        let (x0, p0) = self.knots[i];
        let (x1, p1) = self.knots[i + 1];
        p0 + (p1 - p0) * (u - x0) / (x1 - x0)
    }

    pub fn pdf(&self, u: f64) -> f64 {
        if u <= 0.0 || u >= 1.0 {
            return 0.0;
        }
        let i = self.segment(u);
        let (x0, p0) = self.knots[i];
        let (x1, p1) = self.knots[i + 1];
        (p1 - p0) / (x1 - x0)
    }
}

/// Density model for TP and FP confidence scores on `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreDistribution {
    Uniform,
    Beta { tp: BetaShape, fp: BetaShape },
    Empirical { tp: EmpiricalCdf, fp: EmpiricalCdf },
}

impl ScoreDistribution {
    pub fn beta(alpha_tp: f64, beta_tp: f64, alpha_fp: f64, beta_fp: f64) -> Result<Self> {
        Ok(ScoreDistribution::Beta {
            tp: BetaShape::new(alpha_tp, beta_tp)?,
            fp: BetaShape::new(alpha_fp, beta_fp)?,
        })
    }

    pub fn empirical(tp_scores: &[f64], fp_scores: &[f64]) -> Self {
        ScoreDistribution::Empirical {
            tp: EmpiricalCdf::new(tp_scores),
            fp: EmpiricalCdf::new(fp_scores),
        }
    }

    /// Parses `uniform` or `beta:a_tp,b_tp,a_fp,b_fp`.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "uniform" {
            return Ok(ScoreDistribution::Uniform);
        }
        let bad = || Error::Config(format!("bad distribution '{text}'"));
        let rest = text.strip_prefix("beta:").ok_or_else(bad)?;
        let v: Vec<f64> = rest
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(bad());
        }
        Self::beta(v[0], v[1], v[2], v[3])
    }

    pub fn tp_pdf(&self, u: f64) -> f64 {
        match self {
            ScoreDistribution::Uniform => uniform_pdf(u),
            ScoreDistribution::Beta { tp, .. } => tp.pdf(u),
            ScoreDistribution::Empirical { tp, .. } => tp.pdf(u),
        }
    }

    pub fn tp_cdf(&self, u: f64) -> f64 {
        match self {
            ScoreDistribution::Uniform => u.clamp(0.0, 1.0),
            ScoreDistribution::Beta { tp, .. } => tp.cdf(u),
            ScoreDistribution::Empirical { tp, .. } => tp.cdf(u),
        }
    }

    pub fn fp_pdf(&self, u: f64) -> f64 {
        match self {
            ScoreDistribution::Uniform => uniform_pdf(u),
            ScoreDistribution::Beta { fp, .. } => fp.pdf(u),
            ScoreDistribution::Empirical { fp, .. } => fp.pdf(u),
        }
    }

    pub fn fp_cdf(&self, u: f64) -> f64 {
        match self {
            ScoreDistribution::Uniform => u.clamp(0.0, 1.0),
            ScoreDistribution::Beta { fp, .. } => fp.cdf(u),
            ScoreDistribution::Empirical { fp, .. } => fp.cdf(u),
        }
    }

    /// Whether the TP density stays bounded as `u -> 0`.
    pub fn tp_density_bounded_at_zero(&self) -> bool {
        match self {
            ScoreDistribution::Beta { tp, .. } => tp.alpha >= 1.0,
            _ => true,
        }
    }
}

fn uniform_pdf(u: f64) -> f64 {
    if (0.0..=1.0).contains(&u) {
        1.0
    } else {
        0.0
    }
}

/// Continuous precision/recall state at score threshold `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrCurvePoint {
    pub u: f64,
    pub c_tp: f64,
    pub c_fp: f64,
    pub n: f64,
    pub precision: f64,
    pub recall: f64,
}

impl PrCurvePoint {
    pub fn at(u: f64, stats: &ClassThresholdStats, dist: &ScoreDistribution) -> Self {
        let c_tp = stats.tp_count as f64 * (1.0 - dist.tp_cdf(u));
        let c_fp = stats.fp_count as f64 * (1.0 - dist.fp_cdf(u));
        let n = c_tp + c_fp;
        // An empty prediction set has no false positives.
        let precision = if n > 0.0 { c_tp / n } else { 1.0 };
        let recall = if stats.gt_count > 0 { c_tp / stats.gt_count as f64 } else { 0.0 };
        PrCurvePoint { u, c_tp, c_fp, n, precision, recall }
    }
}

/// Teacher and student marginals for one image and their gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityRecord {
    pub image_id: ImageId,
    pub delta_teacher: f64,
    pub delta_student: f64,
    pub learnability: f64,
}

impl LearnabilityRecord {
    pub fn new(image_id: ImageId, delta_teacher: f64, delta_student: f64) -> Self {
        LearnabilityRecord {
            image_id,
            delta_teacher,
            delta_student,
            learnability: delta_teacher - delta_student,
        }
    }
}
