//! Non-uniform score priors: Beta fitting (moments and maximum likelihood),
//! quadrature of the general insertion integrals, and polynomial surrogates
//! of the resulting marginal curves.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::closedform::{InsertionKind, MarginalModel};
use crate::error::{Error, Result};
use crate::model::{
    clamp_score, BetaShape, CategoryId, ClassThresholdStats, IouThresholdGrid, MatchedDataset,
    PoolStats, ScoreDistribution,
};

pub const BETA_PARAM_RANGE: (f64, f64) = (1e-3, 1e3);
/// Cells with fewer samples on a side keep the uniform prior on that side.
pub const MIN_FIT_SAMPLES: usize = 10;
pub const DEFAULT_QUADRATURE_POINTS: usize = 300;
pub const SURROGATE_DEGREE: usize = 6;
pub const SURROGATE_SAMPLES: usize = 64;
pub const DEFAULT_RESIDUAL_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
    pub sample_count: usize,
}

impl BetaParams {
    fn clamped(alpha: f64, beta: f64, sample_count: usize) -> Self {
        let (lo, hi) = BETA_PARAM_RANGE;
        BetaParams { alpha: alpha.clamp(lo, hi), beta: beta.clamp(lo, hi), sample_count }
    }

    pub fn uniform() -> Self {
        BetaParams { alpha: 1.0, beta: 1.0, sample_count: 0 }
    }

    pub fn shape(&self) -> BetaShape {
        BetaShape { alpha: self.alpha, beta: self.beta }
    }

    /// Total log-likelihood of `samples` (clamped into the open interval).
    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        let (ml, m1l) = log_means(samples);
        samples.len() as f64 * ll_per_sample(self.alpha, self.beta, ml, m1l)
    }
}

fn log_means(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let (a, b) = samples.iter().fold((0.0, 0.0), |(a, b), x| {
        let x = clamp_score(*x);
        (a + x.ln(), b + (1.0 - x).ln())
    });
    (a / n, b / n)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn ll_per_sample(a: f64, b: f64, mean_ln: f64, mean_ln1m: f64) -> f64 {
    (a - 1.0) * mean_ln + (b - 1.0) * mean_ln1m - ln_beta(a, b)
}

/// Second derivative of `ln Gamma`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Method-of-moments Beta fit.
pub fn fit_beta_mom(samples: &[f64]) -> Result<BetaParams> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "{n} sample(s); need at least 2, fall back to the uniform prior"
        )));
    }
    let xs: Vec<f64> = samples.iter().map(|x| clamp_score(*x)).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var.is_nan() || var <= 1e-14 {
        return Err(Error::Degenerate("zero variance; fall back to the uniform prior".into()));
    }
    let common = mean * (1.0 - mean) / var - 1.0;
    Ok(BetaParams::clamped(mean * common, (1.0 - mean) * common, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub params: BetaParams,
    pub converged: bool,
    pub iterations: usize,
}

/// Maximum-likelihood Beta fit by damped Newton iteration from the moment estimate.
/// On non-convergence the moment estimate is returned with `converged = false`.
pub fn fit_beta_mle(samples: &[f64]) -> Result<MleFit> {
    let mom = fit_beta_mom(samples)?;
    let n = samples.len();
    let (ml, m1l) = log_means(samples);
    let (lo, hi) = BETA_PARAM_RANGE;
    let (mut a, mut b) = (mom.alpha, mom.beta);
    let mut ll = ll_per_sample(a, b, ml, m1l);
    for it in 0..100 {
        let psi_ab = digamma(a + b);
        let g = [ml - digamma(a) + psi_ab, m1l - digamma(b) + psi_ab];
        if g[0].hypot(g[1]) < 1e-8 {
            return Ok(MleFit { params: BetaParams::clamped(a, b, n), converged: true, iterations: it });
        }
        let t_ab = trigamma(a + b);
        let h = [[t_ab - trigamma(a), t_ab], [t_ab, t_ab - trigamma(b)]];
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        // Newton direction -H^{-1} g; H is negative definite, so this ascends.
        let mut da = -(h[1][1] * g[0] - h[0][1] * g[1]) / det;
        let mut db = -(-h[1][0] * g[0] + h[0][0] * g[1]) / det;
        let mut accepted = false;
        for _ in 0..60 {
            let (na, nb) = (a + da, b + db);
            if na >= lo && nb >= lo && na <= hi && nb <= hi {
                let nll = ll_per_sample(na, nb, ml, m1l);
                if nll >= ll - 1e-15 {
                    a = na;
                    b = nb;
                    ll = nll;
                    accepted = true;
                    break;
                }
            }
            da /= 2.0;
            db /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    let psi_ab = digamma(a + b);
    let gnorm = (ml - digamma(a) + psi_ab).hypot(m1l - digamma(b) + psi_ab);
    if gnorm < 1e-8 {
        return Ok(MleFit { params: BetaParams::clamped(a, b, n), converged: true, iterations: 100 });
    }
    log::warn!("Beta MLE did not converge (|grad| = {gnorm:e}); using the moment estimate");
    Ok(MleFit { params: mom, converged: false, iterations: 100 })
}

/// Fitted priors for one (class, threshold) cell. A side is `None` when it
/// fell back to the uniform prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrior {
    pub stats: ClassThresholdStats,
    pub tau_index: usize,
    pub tp: Option<BetaParams>,
    pub fp: Option<BetaParams>,
}

impl CellPrior {
    pub fn distribution(&self) -> ScoreDistribution {
        let tp = self.tp.unwrap_or_else(BetaParams::uniform);
        let fp = self.fp.unwrap_or_else(BetaParams::uniform);
        if self.tp.is_none() && self.fp.is_none() {
            ScoreDistribution::Uniform
        } else {
            ScoreDistribution::Beta { tp: tp.shape(), fp: fp.shape() }
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.tp.is_none() || self.fp.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable {
    pub grid: IouThresholdGrid,
    pub cells: BTreeMap<(CategoryId, usize), CellPrior>,
}

impl PriorTable {
    pub fn get(&self, category: CategoryId, tau_index: usize) -> Option<&CellPrior> {
        self.cells.get(&(category, tau_index))
    }

    pub fn pool_stats(&self) -> Result<PoolStats> {
        PoolStats::from_cells(self.grid.clone(), self.cells.values().map(|c| c.stats).collect())
    }
}

fn fit_side(samples: &[f64]) -> Option<BetaParams> {
    if samples.len() < MIN_FIT_SAMPLES {
        return None;
    }
    fit_beta_mle(samples).ok().map(|f| f.params)
}

/// One MLE fit per (class, threshold) side; sparse or degenerate sides keep
/// the uniform prior.
pub fn fit_dataset_priors(ds: &MatchedDataset) -> PriorTable {
    let gt = ds.gt_counts();
    let mut classes: BTreeSet<CategoryId> = gt.keys().copied().collect();
    let mut scores: BTreeMap<(CategoryId, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for img in ds.images.values() {
        for d in &img.detections {
            classes.insert(d.category_id);
            for (k, tp) in d.tp_flags.iter().enumerate() {
                let e = scores.entry((d.category_id, k)).or_default();
                if *tp { e.0.push(d.score) } else { e.1.push(d.score) }
            }
        }
    }
    let keys: Vec<(CategoryId, usize)> = classes
        .iter()
        .flat_map(|c| (0..ds.grid.len()).map(move |k| (*c, k)))
        .collect();
    let empty = (Vec::new(), Vec::new());
    let cells = keys
        .par_iter()
        .map(|&(c, k)| {
            let (tps, fps) = scores.get(&(c, k)).unwrap_or(&empty);
            let stats = ClassThresholdStats::new(
                c,
                ds.grid.thresholds()[k],
                tps.len() as u64,
                fps.len() as u64,
                gt.get(&c).copied().unwrap_or(0),
            );
            ((c, k), CellPrior { stats, tau_index: k, tp: fit_side(tps), fp: fit_side(fps) })
        })
        .collect();
    PriorTable { grid: ds.grid.clone(), cells }
}

/// Composite trapezoid rule with `n_points` nodes.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n_points: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let intervals = n_points.max(2) - 1;
    let h = (b - a) / intervals as f64;
    let mut acc = 0.5 * (f(a) + f(b));
    for i in 1..intervals {
        acc += f(a + h * i as f64);
    }
    acc * h
}

/// Lower integration limit; moved off zero when the TP density is unbounded there.
fn lower_limit(dist: &ScoreDistribution) -> f64 {
    if dist.tp_density_bounded_at_zero() { 0.0 } else { 1e-6 }
}

/// Insertion marginal under an arbitrary score prior by trapezoid quadrature.
pub fn delta_ap_numeric(
    s: f64,
    kind: InsertionKind,
    stats: &ClassThresholdStats,
    dist: &ScoreDistribution,
    n_points: usize,
) -> Result<f64> {
    if stats.gt_count == 0 {
        return Err(Error::Domain(format!(
            "class {} has no ground truth; AP is undefined",
            stats.category_id
        )));
    }
    if n_points < 10 {
        return Err(Error::Config(format!("{n_points} quadrature points; need at least 10")));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("score {s} outside [0, 1]")));
    }
    let t = stats.tp_count as f64;
    let f = stats.fp_count as f64;
    let gt = stats.gt_count as f64;
    let c_tp = |u: f64| t * (1.0 - dist.tp_cdf(u));
    let c_fp = |u: f64| f * (1.0 - dist.fp_cdf(u));
    let lower = lower_limit(dist);
    let integral = |num: &dyn Fn(f64) -> f64| {
        if t == 0.0 {
            return 0.0;
        }
        trapezoid(
            |u| {
                let n = c_tp(u) + c_fp(u);
                if n <= 0.0 {
                    0.0
                } else {
                    num(u) / (n * (n + 1.0)) * dist.tp_pdf(u)
                }
            },
            lower,
            s,
            n_points,
        )
    };
    Ok(match kind {
        InsertionKind::Tp => {
            let self_term = (c_tp(s) + 1.0) / (c_tp(s) + c_fp(s) + 1.0);
            self_term / gt + t / gt * integral(&c_fp)
        }
        InsertionKind::Fp => -(t / gt) * integral(&c_tp),
    })
}

/// Per-cell numeric marginals with the fitted Beta priors.
#[derive(Debug, Clone)]
pub struct BetaTableModel {
    pub table: PriorTable,
    pub n_points: usize,
}

impl BetaTableModel {
    pub fn new(table: PriorTable) -> Self {
        BetaTableModel { table, n_points: DEFAULT_QUADRATURE_POINTS }
    }
}

impl MarginalModel for BetaTableModel {
    fn delta(&self, kind: InsertionKind, stats: &ClassThresholdStats, tau_index: usize, s: f64) -> f64 {
        let dist = self
            .table
            .get(stats.category_id, tau_index)
            .map(CellPrior::distribution)
            .unwrap_or(ScoreDistribution::Uniform);
        delta_ap_numeric(s, kind, stats, &dist, self.n_points).expect("valid cell")
    }
}

/// Degree-6 polynomial, coefficients in increasing power of `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Polynomial(pub [f64; SURROGATE_DEGREE + 1]);

impl Polynomial {
    pub fn eval(&self, s: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    /// Least-squares fit.
    pub fn fit(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let m = DMatrix::from_fn(xs.len(), SURROGATE_DEGREE + 1, |i, j| xs[i].powi(j as i32));
        let y = DVector::from_column_slice(ys);
        let svd = m.svd(true, true);
        let sol = svd
            .solve(&y, 1e-14)
            .map_err(|e| Error::Domain(format!("polynomial fit failed: {e}")))?;
        let mut c = [0.0; SURROGATE_DEGREE + 1];
        c.copy_from_slice(sol.as_slice());
        Ok(Polynomial(c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSurrogate {
    pub tp: Polynomial,
    pub fp: Polynomial,
    pub residual: f64,
    /// Residual above threshold or a monotonicity violation; the numeric path is used instead.
    pub flagged: bool,
}

/// Evenly spaced interior sample points `(i + 1/2) / n`.
pub fn surrogate_sample_points() -> Vec<f64> {
    (0..SURROGATE_SAMPLES).map(|i| (i as f64 + 0.5) / SURROGATE_SAMPLES as f64).collect()
}

fn monotone(p: &Polynomial, increasing: bool) -> bool {
    let vals: Vec<f64> = (0..100).map(|i| p.eval((i as f64 + 0.5) / 100.0)).collect();
    vals.windows(2).all(|w| if increasing { w[1] >= w[0] - 1e-12 } else { w[1] <= w[0] + 1e-12 })
}

pub fn fit_cell_surrogate(
    stats: &ClassThresholdStats,
    dist: &ScoreDistribution,
    threshold: f64,
) -> Result<CellSurrogate> {
    let xs = surrogate_sample_points();
    let sample = |kind| -> Result<Vec<f64>> {
        xs.iter()
            .map(|s| delta_ap_numeric(*s, kind, stats, dist, DEFAULT_QUADRATURE_POINTS))
            .collect()
    };
    let ys_tp = sample(InsertionKind::Tp)?;
    let ys_fp = sample(InsertionKind::Fp)?;
    let tp = Polynomial::fit(&xs, &ys_tp)?;
    let fp = Polynomial::fit(&xs, &ys_fp)?;
    let residual = xs
        .iter()
        .zip(ys_tp.iter().zip(&ys_fp))
        .map(|(s, (a, b))| (tp.eval(*s) - a).abs().max((fp.eval(*s) - b).abs()))
        .fold(0.0, f64::max);
    let flagged = residual > threshold || !monotone(&tp, true) || !monotone(&fp, false);
    Ok(CellSurrogate { tp, fp, residual, flagged })
}

#[derive(Debug, Clone)]
pub struct PolySurrogate {
    pub table: PriorTable,
    pub cells: BTreeMap<(CategoryId, usize), CellSurrogate>,
    pub threshold: f64,
}

/// Fits TP and FP surrogates for every cell with ground truth.
pub fn fit_surrogates(table: &PriorTable, threshold: f64) -> Result<PolySurrogate> {
    let fitted: Vec<((CategoryId, usize), CellSurrogate)> = table
        .cells
        .par_iter()
        .filter(|(_, c)| c.stats.gt_count > 0)
        .map(|(k, c)| fit_cell_surrogate(&c.stats, &c.distribution(), threshold).map(|s| (*k, s)))
        .collect::<Result<_>>()?;
    Ok(PolySurrogate { table: table.clone(), cells: fitted.into_iter().collect(), threshold })
}

impl MarginalModel for PolySurrogate {
    fn delta(&self, kind: InsertionKind, stats: &ClassThresholdStats, tau_index: usize, s: f64) -> f64 {
        match self.cells.get(&(stats.category_id, tau_index)) {
            Some(c) if !c.flagged => match kind {
                InsertionKind::Tp => c.tp.eval(s),
                InsertionKind::Fp => c.fp.eval(s),
            },
            _ => {
                let dist = self
                    .table
                    .get(stats.category_id, tau_index)
                    .map(CellPrior::distribution)
                    .unwrap_or(ScoreDistribution::Uniform);
                delta_ap_numeric(s, kind, stats, &dist, DEFAULT_QUADRATURE_POINTS).expect("valid cell")
            }
        }
    }
}

/// One row of the prior/surrogate JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRow {
    pub class: CategoryId,
    pub tau: f64,
    pub alpha_tp: f64,
    pub beta_tp: f64,
    pub alpha_fp: f64,
    pub beta_fp: f64,
    #[serde(rename = "T")]
    pub tp_count: u64,
    #[serde(rename = "F")]
    pub fp_count: u64,
    pub gt: u64,
    pub tp_fitted: bool,
    pub fp_fitted: bool,
    #[serde(default)]
    pub coeffs_tp: Option<[f64; SURROGATE_DEGREE + 1]>,
    #[serde(default)]
    pub coeffs_fp: Option<[f64; SURROGATE_DEGREE + 1]>,
    #[serde(default)]
    pub residual: Option<f64>,
    #[serde(default)]
    pub flagged: bool,
}

fn row_for(cell: &CellPrior, sur: Option<&CellSurrogate>) -> PriorRow {
    let tp = cell.tp.unwrap_or_else(BetaParams::uniform);
    let fp = cell.fp.unwrap_or_else(BetaParams::uniform);
    PriorRow {
        class: cell.stats.category_id,
        tau: cell.stats.threshold,
        alpha_tp: tp.alpha,
        beta_tp: tp.beta,
        alpha_fp: fp.alpha,
        beta_fp: fp.beta,
        tp_count: cell.stats.tp_count,
        fp_count: cell.stats.fp_count,
        gt: cell.stats.gt_count,
        tp_fitted: cell.tp.is_some(),
        fp_fitted: cell.fp.is_some(),
        coeffs_tp: sur.map(|s| s.tp.0),
        coeffs_fp: sur.map(|s| s.fp.0),
        residual: sur.map(|s| s.residual),
        flagged: sur.is_some_and(|s| s.flagged),
    }
}

impl PriorTable {
    pub fn to_rows(&self) -> Vec<PriorRow> {
        self.cells.values().map(|c| row_for(c, None)).collect()
    }

    pub fn from_rows(rows: &[PriorRow]) -> Result<Self> {
        let taus: BTreeSet<u64> = rows.iter().map(|r| (r.tau * 1e9).round() as u64).collect();
        let grid = IouThresholdGrid::new(taus.iter().map(|t| *t as f64 / 1e9).collect())?;
        let mut cells = BTreeMap::new();
        for r in rows {
            let k = grid
                .thresholds()
                .iter()
                .position(|t| (t - r.tau).abs() < 1e-9)
                .expect("tau collected above");
            let side = |fitted: bool, a: f64, b: f64, n: u64| {
                fitted.then_some(BetaParams { alpha: a, beta: b, sample_count: n as usize })
            };
            cells.insert(
                (r.class, k),
                CellPrior {
                    stats: ClassThresholdStats::new(r.class, grid.thresholds()[k], r.tp_count, r.fp_count, r.gt),
                    tau_index: k,
                    tp: side(r.tp_fitted, r.alpha_tp, r.beta_tp, r.tp_count),
                    fp: side(r.fp_fitted, r.alpha_fp, r.beta_fp, r.fp_count),
                },
            );
        }
        Ok(PriorTable { grid, cells })
    }
}

impl PolySurrogate {
    pub fn to_rows(&self) -> Vec<PriorRow> {
        self.table
            .cells
            .iter()
            .map(|(k, c)| row_for(c, self.cells.get(k)))
            .collect()
    }

    /// Rebuilds a surrogate from rows; rows without coefficients are refitted.
    pub fn from_rows(rows: &[PriorRow], threshold: f64) -> Result<Self> {
        let table = PriorTable::from_rows(rows)?;
        let mut cells = BTreeMap::new();
        for r in rows {
            let k = table.grid.thresholds().iter().position(|t| (t - r.tau).abs() < 1e-9).unwrap();
            let cell = &table.cells[&(r.class, k)];
            if cell.stats.gt_count == 0 {
                continue;
            }
            let sur = match (r.coeffs_tp, r.coeffs_fp, r.residual) {
                (Some(tp), Some(fp), Some(residual)) => CellSurrogate {
                    tp: Polynomial(tp),
                    fp: Polynomial(fp),
                    residual,
                    flagged: r.flagged || residual > threshold,
                },
                _ => fit_cell_surrogate(&cell.stats, &cell.distribution(), threshold)?,
            };
            cells.insert((r.class, k), sur);
        }
        Ok(PolySurrogate { table, cells, threshold })
    }
}
