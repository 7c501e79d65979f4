//! Monte Carlo estimate of single-insertion AP changes on a simulated
//! (class, threshold) cell, compared against the analytic marginals.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closedform::{delta_ap_fp_uniform, delta_ap_tp_uniform, InsertionKind};
use crate::error::{Error, Result};
use crate::exactap::ap_ranked;
use crate::model::{ClassThresholdStats, EmpiricalCdf, ScoreDistribution};
use crate::priors::{delta_ap_numeric, DEFAULT_QUADRATURE_POINTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub tp_count: u64,
    pub fp_count: u64,
    pub gt_count: u64,
    pub scores: Vec<f64>,
    pub trials: usize,
    pub dist: ScoreDistribution,
    pub seed: u64,
}

/// `n` evenly spaced values over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            tp_count: 800,
            fp_count: 9200,
            gt_count: 1000,
            scores: linspace(0.01, 0.99, 10),
            trials: 1000,
            dist: ScoreDistribution::Uniform,
            seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if let Some(s) = self.scores.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Config(format!("insertion score {s} outside (0, 1)")));
        }
        // An inserted TP claims one of the GT_count - T unrecalled ground truths.
        if self.tp_count >= self.gt_count {
            return Err(Error::Config(format!(
                "T = {} must be below T_GT = {}",
                self.tp_count, self.gt_count
            )));
        }
        Ok(())
    }

    pub fn stats(&self) -> ClassThresholdStats {
        ClassThresholdStats::counts(self.tp_count, self.fp_count, self.gt_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub s: f64,
    pub mean: f64,
    /// Infinite with a single trial.
    pub stderr: f64,
}

enum Sampler<'a> {
    Uniform,
    Beta(Beta<f64>),
    Inverse(&'a EmpiricalCdf),
}

impl Sampler<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Uniform => rng.random(),
            Sampler::Beta(b) => b.sample(rng),
            Sampler::Inverse(cdf) => {
                let target: f64 = rng.random();
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if cdf.cdf(mid) < target { lo = mid } else { hi = mid }
                }
                0.5 * (lo + hi)
            }
        }
    }
}

fn samplers(dist: &ScoreDistribution) -> Result<(Sampler<'_>, Sampler<'_>)> {
    let beta = |a, b| {
        Beta::new(a, b).map(Sampler::Beta).map_err(|e| Error::Config(format!("beta({a}, {b}): {e}")))
    };
    Ok(match dist {
        ScoreDistribution::Uniform => (Sampler::Uniform, Sampler::Uniform),
        ScoreDistribution::Beta { tp, fp } => (beta(tp.alpha, tp.beta)?, beta(fp.alpha, fp.beta)?),
        ScoreDistribution::Empirical { tp, fp } => (Sampler::Inverse(tp), Sampler::Inverse(fp)),
    })
}

/// AP change for each insertion score in one simulated pool.
fn one_trial(cfg: &McConfig, kind: InsertionKind, tp: &Sampler, fp: &Sampler, trial: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial);
    let mut pool: Vec<(f64, bool)> = Vec::with_capacity((cfg.tp_count + cfg.fp_count) as usize);
    pool.extend((0..cfg.tp_count).map(|_| (tp.draw(&mut rng), true)));
    pool.extend((0..cfg.fp_count).map(|_| (fp.draw(&mut rng), false)));
    pool.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = pool.iter().map(|p| p.1).collect();
    let base = ap_ranked(flags.iter().copied(), cfg.gt_count).expect("gt_count > 0");
    let inserted = kind == InsertionKind::Tp;
    cfg.scores
        .iter()
        .map(|s| {
            // The inserted detection ranks after existing detections with equal score.
            let pos = pool.partition_point(|p| p.0 >= *s);
            let ranked = flags[..pos]
                .iter()
                .copied()
                .chain(std::iter::once(inserted))
                .chain(flags[pos..].iter().copied());
            ap_ranked(ranked, cfg.gt_count).expect("gt_count > 0") - base
        })
        .collect()
}

/// Mean and standard error of the AP change per insertion score.
pub fn mc_delta_ap(cfg: &McConfig, kind: InsertionKind) -> Result<Vec<McEstimate>> {
    cfg.validate()?;
    let (tp, fp) = samplers(&cfg.dist)?;
    let k = cfg.scores.len();
    let (sum, sum_sq) = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| one_trial(cfg, kind, &tp, &fp, t))
        .fold(
            || (vec![0.0; k], vec![0.0; k]),
            |(mut s, mut q), d| {
                for (i, v) in d.iter().enumerate() {
                    s[i] += v;
                    q[i] += v * v;
                }
                (s, q)
            },
        )
        .reduce(
            || (vec![0.0; k], vec![0.0; k]),
            |(mut s, mut q), (s2, q2)| {
                for i in 0..k {
                    s[i] += s2[i];
                    q[i] += q2[i];
                }
                (s, q)
            },
        );
    let n = cfg.trials as f64;
    Ok(cfg
        .scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mean = sum[i] / n;
            let stderr = if cfg.trials > 1 {
                let var = ((sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            } else {
                f64::INFINITY
            };
            McEstimate { s: *s, mean, stderr }
        })
        .collect())
}

/// Analytic marginal for the config's cell: closed form under the uniform
/// prior, quadrature otherwise.
pub fn analytic_delta(cfg: &McConfig, kind: InsertionKind, s: f64) -> Result<f64> {
    let stats = cfg.stats();
    match (&cfg.dist, kind) {
        (ScoreDistribution::Uniform, InsertionKind::Tp) => delta_ap_tp_uniform(s, &stats),
        (ScoreDistribution::Uniform, InsertionKind::Fp) => delta_ap_fp_uniform(s, &stats),
        (dist, kind) => delta_ap_numeric(s, kind, &stats, dist, DEFAULT_QUADRATURE_POINTS),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub s: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub analytic: f64,
    pub abs_dev: f64,
    /// `abs_dev <= max(1e-3, 3 * stderr)`.
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub kind: InsertionKind,
    pub config: McConfig,
    pub rows: Vec<McRow>,
    pub max_abs_dev: f64,
}

pub const MC_ABS_TOLERANCE: f64 = 1e-3;

pub fn mc_report(cfg: &McConfig, kind: InsertionKind) -> Result<McReport> {
    let est = mc_delta_ap(cfg, kind)?;
    let rows = est
        .iter()
        .map(|e| {
            let analytic = analytic_delta(cfg, kind, e.s)?;
            let abs_dev = (analytic - e.mean).abs();
            Ok(McRow {
                s: e.s,
                mc_mean: e.mean,
                mc_stderr: e.stderr,
                analytic,
                abs_dev,
                within_tolerance: abs_dev <= MC_ABS_TOLERANCE.max(3.0 * e.stderr),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_abs_dev = rows.iter().map(|r| r.abs_dev).fold(0.0, f64::max);
    Ok(McReport { kind, config: cfg.clone(), rows, max_abs_dev })
}

impl McReport {
    pub fn all_within_tolerance(&self) -> bool {
        self.rows.iter().all(|r| r.within_tolerance)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let kind = match self.kind {
            InsertionKind::Tp => "TP",
            InsertionKind::Fp => "FP",
        };
        let c = &self.config;
        let _ = writeln!(
            out,
            "{kind} insertion  T={} F={} T_GT={} trials={} seed={}",
            c.tp_count, c.fp_count, c.gt_count, c.trials, c.seed
        );
        let _ = writeln!(out, "{:>8} {:>14} {:>12} {:>14} {:>12}  ok", "s", "mc_mean", "mc_stderr", "analytic", "abs_dev");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8.4} {:>14.6e} {:>12.3e} {:>14.6e} {:>12.3e}  {}",
                r.s,
                r.mc_mean,
                r.mc_stderr,
                r.analytic,
                r.abs_dev,
                if r.within_tolerance { "yes" } else { "NO" }
            );
        }
        let _ = writeln!(out, "max |deviation| = {:.3e}", self.max_abs_dev);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trials: usize, seed: u64) -> McConfig {
        McConfig { tp_count: 80, fp_count: 920, gt_count: 100, trials, seed, ..McConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(McConfig::default().validate().is_ok());
        assert!(McConfig { trials: 0, ..McConfig::default() }.validate().is_err());
        assert!(McConfig { scores: vec![0.0], ..McConfig::default() }.validate().is_err());
        assert!(McConfig { tp_count: 1000, ..McConfig::default() }.validate().is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let a = mc_report(&small(50, 3), InsertionKind::Tp).unwrap();
        let b = mc_report(&small(50, 3), InsertionKind::Tp).unwrap();
        assert_eq!(a, b);
        let c = mc_report(&small(50, 4), InsertionKind::Tp).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn single_trial_stderr_is_infinite() {
        let r = mc_report(&small(1, 0), InsertionKind::Fp).unwrap();
        assert!(r.rows.iter().all(|r| r.mc_stderr.is_infinite()));
    }

    #[test]
    fn stderr_shrinks_with_trials() {
        let a = mc_delta_ap(&small(400, 9), InsertionKind::Tp).unwrap();
        let b = mc_delta_ap(&small(1600, 9), InsertionKind::Tp).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let ratio = x.stderr / y.stderr;
            assert!((ratio - 2.0).abs() <= 0.4, "s={} ratio {ratio}", x.s);
        }
    }

    #[test]
    fn sign_pattern() {
        let cfg = small(400, 1);
        let tp = mc_delta_ap(&cfg, InsertionKind::Tp).unwrap();
        let fp = mc_delta_ap(&cfg, InsertionKind::Fp).unwrap();
        for e in &tp {
            assert!(e.mean > 3.0 * e.stderr);
        }
        for w in tp.windows(2) {
            assert!(w[1].mean - w[0].mean > -3.0 * w[0].stderr.hypot(w[1].stderr));
        }
        for e in &fp[1..] {
            assert!(e.mean < -3.0 * e.stderr);
        }
        for w in fp.windows(2) {
            assert!(w[1].mean - w[0].mean < 3.0 * w[0].stderr.hypot(w[1].stderr));
        }
        // Near the boundary the analytic value is close to zero.
        let near_zero = analytic_delta(&cfg, InsertionKind::Fp, 0.01).unwrap();
        assert!(near_zero.abs() < 1e-5);
        assert!((fp[0].mean - near_zero).abs() <= 3.0 * fp[0].stderr);
    }

    #[test]
    fn inserted_tp_at_top_of_empty_pool_is_one_over_gt() {
        let cfg = McConfig { tp_count: 0, fp_count: 0, gt_count: 4, scores: vec![0.5], trials: 3, ..McConfig::default() };
        let e = mc_delta_ap(&cfg, InsertionKind::Tp).unwrap();
        assert_eq!(e[0].mean, 0.25);
    }

    #[test]
    fn beta_prior_matches_quadrature_at_half() {
        let cfg = McConfig {
            tp_count: 200,
            fp_count: 1800,
            gt_count: 300,
            scores: vec![0.5],
            trials: 2000,
            dist: ScoreDistribution::beta(4.0, 2.0, 1.5, 5.0).unwrap(),
            seed: 2,
        };
        for kind in [InsertionKind::Tp, InsertionKind::Fp] {
            let r = mc_report(&cfg, kind).unwrap();
            let row = &r.rows[0];
            assert!(row.abs_dev <= 3.0 * row.mc_stderr, "{}", r.to_text());
        }
    }

    #[test]
    fn report_text_lists_every_score() {
        let r = mc_report(&small(20, 0), InsertionKind::Tp).unwrap();
        let text = r.to_text();
        assert_eq!(text.lines().count(), 2 + 10 + 1);
        assert!(text.contains("max |deviation|"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 10);
    }
}
