//! Uniform-prior insertion marginals, image-level aggregation over classes and
//! IoU thresholds, and the teacher/student learnability gap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassThresholdStats, MatchedDetection, PoolStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertionKind {
    Tp,
    Fp,
}

fn check(s: f64, stats: &ClassThresholdStats) -> Result<()> {
    if stats.gt_count == 0 {
        return Err(Error::Domain(format!(
            "class {} has no ground truth; AP is undefined",
            stats.category_id
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("score {s} outside [0, 1]")));
    }
    Ok(())
}

/// `ln((A + 1) / (A(1 - s) + 1))`, written as a `ln_1p` so small `s` keeps precision.
fn log_ratio(total: f64, s: f64) -> f64 {
    (total * s / (total * (1.0 - s) + 1.0)).ln_1p()
}

/// AP change of one cell when a TP with score `s` is inserted, uniform prior.
pub fn delta_ap_tp_uniform(s: f64, stats: &ClassThresholdStats) -> Result<f64> {
    check(s, stats)?;
    let t = stats.tp_count as f64;
    let f = stats.fp_count as f64;
    let a = stats.total as f64;
    let self_term = (t * (1.0 - s) + 1.0) / (a * (1.0 - s) + 1.0);
    let reweight = if a > 0.0 { t * f / (a * a) * log_ratio(a, s) } else { 0.0 };
    Ok((self_term + reweight) / stats.gt_count as f64)
}

/// AP change of one cell when an FP with score `s` is inserted, uniform prior.
pub fn delta_ap_fp_uniform(s: f64, stats: &ClassThresholdStats) -> Result<f64> {
    check(s, stats)?;
    if stats.tp_count == 0 || stats.total == 0 {
        return Ok(0.0);
    }
    let ratio = stats.tp_count as f64 / stats.total as f64;
    Ok(-(ratio * ratio) * log_ratio(stats.total as f64, s) / stats.gt_count as f64)
}

/// Source of single-insertion AP marginals for a (class, threshold) cell.
pub trait MarginalModel: Sync {
    fn delta(&self, kind: InsertionKind, stats: &ClassThresholdStats, tau_index: usize, s: f64) -> f64;
}

/// Closed-form marginals under a uniform score prior.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformClosedForm;

impl MarginalModel for UniformClosedForm {
    fn delta(&self, kind: InsertionKind, stats: &ClassThresholdStats, _tau_index: usize, s: f64) -> f64 {
        let v = match kind {
            InsertionKind::Tp => delta_ap_tp_uniform(s, stats),
            InsertionKind::Fp => delta_ap_fp_uniform(s, stats),
        };
        v.expect("cells handed out by PoolStats have ground truth")
    }
}

/// Estimated mAP change from adding one image's detections to the pool:
/// per-detection TP/FP marginals summed over thresholds, divided by
/// `|classes with ground truth| * |thresholds|`. Detections of classes with
/// no ground truth in the pool are skipped.
pub fn image_detgain(
    detections: &[MatchedDetection],
    pool: &PoolStats,
    model: &impl MarginalModel,
) -> f64 {
    let classes = pool.evaluated_classes();
    if classes == 0 || detections.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for d in detections {
        for (k, is_tp) in d.tp_flags.iter().enumerate() {
            let Some(stats) = pool.cell(d.category_id, k) else { continue };
            let kind = if *is_tp { InsertionKind::Tp } else { InsertionKind::Fp };
            acc += model.delta(kind, &stats, k, d.score);
        }
    }
    acc / (classes * pool.grid.len()) as f64
}

/// Teacher marginal minus student marginal.
pub fn learnability(delta_teacher: f64, delta_student: f64) -> f64 {
    delta_teacher - delta_student
}
