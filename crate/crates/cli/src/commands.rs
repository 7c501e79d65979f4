use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;

use detgain_core::closedform::{image_detgain, InsertionKind, UniformClosedForm};
use detgain_core::curation::{
    iterations_per_epoch, run_simulation, select_over_records, CurationConfig, Curator, PriorMode, PriorModel,
    SimulationSummary,
};
use detgain_core::exactap::exact_delta_map;
use detgain_core::ingest::{
    corrupt_dataset, load_detections, load_ground_truth, CorruptionConfig, CorruptionKind, CorruptionManifest,
    Dataset,
};
use detgain_core::matching::{match_dataset, truncate_per_image};
use detgain_core::model::{
    DetectionRecord, ImageId, IouThresholdGrid, LearnabilityRecord, PoolStats, ScoreDistribution, StatsSource,
    TfRatio,
};
use detgain_core::montecarlo::{linspace, mc_report, McConfig};
use detgain_core::priors::{
    fit_dataset_priors, fit_surrogates, BetaTableModel, PolySurrogate, PriorRow, PriorTable,
    DEFAULT_RESIDUAL_THRESHOLD,
};
use serde::{Deserialize, Serialize};

use crate::output::{emit, json_bytes, write_atomic, CliError, CmdResult};
use crate::{Format, GlobalArgs, ScoringArgs};

fn grid(g: &GlobalArgs) -> CmdResult<IouThresholdGrid> {
    IouThresholdGrid::parse(&g.tau_grid)
        .map_err(|e| CliError::invalid(anyhow!("--tau-grid '{}': {e}", g.tau_grid)))
}

fn load_gt(g: &GlobalArgs, path: &Path) -> CmdResult<Dataset> {
    let (ds, report) = load_ground_truth(path)?;
    match &g.report {
        Some(p) => write_atomic(p, &json_bytes(&report)?)?,
        None => eprintln!(
            "loaded {}: {} images, {} annotations, {} crowd dropped",
            path.display(),
            report.images,
            report.annotations_loaded,
            report.crowd_dropped
        ),
    }
    Ok(ds)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::input)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(CliError::input)
}

fn stats_source(s: &ScoringArgs) -> CmdResult<StatsSource> {
    match s.stats.as_str() {
        "dataset" => Ok(StatsSource::Dataset),
        "fixed-ratio" => {
            let r = TfRatio::parse(&s.tf_ratio)?;
            Ok(StatsSource::FixedRatio { tp: r.tp, fp: r.fp })
        }
        other => Err(CliError::invalid(anyhow!("--stats '{other}' (expected dataset or fixed-ratio)"))),
    }
}

fn curation_config(g: &GlobalArgs, s: &ScoringArgs, ratio: f64, superbatch: usize) -> CmdResult<CurationConfig> {
    let cfg = CurationConfig {
        ratio,
        superbatch_size: superbatch,
        seed: g.seed,
        prior: PriorMode::parse(&s.prior)?,
        stats_source: stats_source(s)?,
        grid: grid(g)?,
        max_dets: g.max_dets,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn curator(
    ds: &Dataset,
    teacher: &[DetectionRecord],
    student: &[DetectionRecord],
    s: &ScoringArgs,
    cfg: CurationConfig,
) -> CmdResult<Curator> {
    let Some(path) = &s.prior_file else {
        return Ok(Curator::new(ds, teacher, student, cfg)?);
    };
    let rows: Vec<PriorRow> = read_json(path)?;
    let model = match cfg.prior {
        PriorMode::Uniform => {
            return Err(CliError::invalid(anyhow!("--prior-file needs --prior beta-table or surrogate")))
        }
        PriorMode::BetaTable => PriorModel::BetaTable(BetaTableModel::new(PriorTable::from_rows(&rows)?)),
        PriorMode::Surrogate => PriorModel::Surrogate(PolySurrogate::from_rows(&rows, DEFAULT_RESIDUAL_THRESHOLD)?),
    };
    let prior = cfg.prior;
    let mut cur = Curator::new(ds, teacher, student, CurationConfig { prior: PriorMode::Uniform, ..cfg })?;
    cur.model = model;
    cur.config.prior = prior;
    Ok(cur)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> CmdResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(CliError::invalid)?;
    }
    w.into_inner().map_err(|e| CliError::invalid(anyhow!("{e}")))
}

fn table_bytes<T: Serialize>(g: &GlobalArgs, rows: &[T]) -> CmdResult<Vec<u8>> {
    match g.format.unwrap_or(Format::Csv) {
        Format::Csv => csv_bytes(rows),
        Format::Json => json_bytes(&rows),
    }
}

pub fn score(
    g: &GlobalArgs,
    gt: &Path,
    teacher: &Path,
    student: &Path,
    s: &ScoringArgs,
    out: Option<&Path>,
) -> CmdResult {
    let ds = load_gt(g, gt)?;
    let t = load_detections(teacher)?;
    let st = load_detections(student)?;
    let cfg = curation_config(g, s, 1.0, 1)?;
    let cur = curator(&ds, &t, &st, s, cfg)?;
    let records: Vec<LearnabilityRecord> = cur.score_all()?.into_values().collect();
    emit(out, &table_bytes(g, &records)?)
}

fn read_scores(path: &Path) -> CmdResult<BTreeMap<ImageId, LearnabilityRecord>> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(CliError::input)?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<LearnabilityRecord>().enumerate() {
        let r = row.with_context(|| format!("{} row {}", path.display(), i + 1)).map_err(CliError::input)?;
        if out.insert(r.image_id, r).is_some() {
            return Err(CliError::input(anyhow!("{}: duplicate image_id {}", path.display(), r.image_id)));
        }
    }
    Ok(out)
}

pub fn select(
    g: &GlobalArgs,
    scores: &Path,
    ratio: f64,
    superbatch: usize,
    iters: Option<usize>,
    out: Option<&Path>,
) -> CmdResult {
    CurationConfig { ratio, superbatch_size: superbatch, ..Default::default() }.validate()?;
    let records = read_scores(scores)?;
    if records.is_empty() {
        return Err(CliError::input(anyhow!("{} has no rows", scores.display())));
    }
    let iters = iters.unwrap_or_else(|| iterations_per_epoch(records.len(), superbatch));
    let trace = select_over_records(&records, ratio, superbatch, g.seed, iters);
    let mut buf = Vec::new();
    for it in &trace.iterations {
        serde_json::to_writer(&mut buf, &it.line()).map_err(CliError::invalid)?;
        buf.push(b'\n');
    }
    emit(out, &buf)
}

pub struct SimulateInputs {
    pub gt: PathBuf,
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub corruption_manifest: Option<PathBuf>,
}

fn summary_text(s: &SimulationSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "iterations            {}", s.iterations);
    let _ = writeln!(t, "images                {}", s.images);
    let _ = writeln!(t, "selections            {}", s.selected_total);
    let _ = writeln!(t, "mean learnability     selected {:.6e}  rejected {:.6e}", s.mean_learnability_selected, s.mean_learnability_rejected);
    let _ = writeln!(t, "selection frequency   {:?}", s.selection_frequency);
    if let (Some(b), Some(f)) = (s.corrupted_base_rate, s.corrupted_selected_fraction) {
        let _ = writeln!(t, "corrupted             base rate {b:.4}  among selections {f:.4}");
    }
    t
}

pub fn simulate(
    g: &GlobalArgs,
    inputs: &SimulateInputs,
    s: &ScoringArgs,
    ratio: f64,
    superbatch: usize,
    iters: usize,
    out: Option<&Path>,
) -> CmdResult {
    let ds = load_gt(g, &inputs.gt)?;
    let t = load_detections(&inputs.teacher)?;
    let st = load_detections(&inputs.student)?;
    let corrupted: Option<BTreeSet<ImageId>> = match &inputs.corruption_manifest {
        Some(p) => Some(read_json::<CorruptionManifest>(p)?.corrupted_image_ids.into_iter().collect()),
        None => None,
    };
    let cfg = curation_config(g, s, ratio, superbatch)?;
    let (trace, summary) = if s.prior_file.is_some() {
        let cur = curator(&ds, &t, &st, s, cfg.clone())?;
        let records = cur.score_all()?;
        let trace = select_over_records(&records, cfg.ratio, cfg.superbatch_size, cfg.seed, iters);
        let summary = detgain_core::curation::summarize(&trace, &ds.image_ids(), &cfg, corrupted.as_ref());
        (trace, summary)
    } else {
        run_simulation(&ds, &t, &st, &cfg, iters, corrupted.as_ref())?
    };
    print!("{}", summary_text(&summary));
    if let Some(p) = out {
        write_atomic(p, &json_bytes(&serde_json::json!({ "summary": summary, "trace": trace }))?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExactRow {
    image_id: ImageId,
    exact: f64,
    estimate: f64,
}

pub fn exact_delta(g: &GlobalArgs, gt: &Path, dets: &Path, images: &[ImageId], out: Option<&Path>) -> CmdResult {
    let ds = load_gt(g, gt)?;
    let d = load_detections(dets)?;
    let matched = match_dataset(&truncate_per_image(&d, g.max_dets), &ds, &grid(g)?)?;
    let ids: Vec<ImageId> = if images.is_empty() { ds.image_ids() } else { images.to_vec() };
    if let Some(id) = ids.iter().find(|id| !ds.has_image(**id)) {
        return Err(CliError::invalid(anyhow!("image {id} is not in {}", gt.display())));
    }
    let rows: Vec<ExactRow> = ids
        .par_iter()
        .map(|id| {
            let mut pool = matched.clone();
            let x = pool.images.remove(id).expect("checked above");
            let exact = exact_delta_map(&pool, &x)?;
            let estimate = image_detgain(&x.detections, &PoolStats::from_dataset(&pool)?, &UniformClosedForm);
            Ok(ExactRow { image_id: *id, exact, estimate })
        })
        .collect::<detgain_core::Result<_>>()?;
    emit(out, &table_bytes(g, &rows)?)
}

#[allow(clippy::too_many_arguments)]
pub fn verify_mc(
    g: &GlobalArgs,
    tp: bool,
    fp: bool,
    dist: &str,
    trials: usize,
    counts: (u64, u64, u64),
    points: usize,
    out: Option<&Path>,
) -> CmdResult {
    let kinds = match (tp, fp) {
        (true, false) => vec![InsertionKind::Tp],
        (false, true) => vec![InsertionKind::Fp],
        _ => vec![InsertionKind::Tp, InsertionKind::Fp],
    };
    let cfg = McConfig {
        tp_count: counts.0,
        fp_count: counts.1,
        gt_count: counts.2,
        scores: linspace(0.01, 0.99, points),
        trials,
        dist: ScoreDistribution::parse(dist)?,
        seed: g.seed,
    };
    cfg.validate()?;
    let mut reports = Vec::new();
    for k in kinds {
        let r = mc_report(&cfg, k)?;
        print!("{}", r.to_text());
        reports.push(r);
    }
    if let Some(p) = out {
        write_atomic(p, &json_bytes(&reports)?)?;
    }
    if reports.iter().all(|r| r.all_within_tolerance()) {
        Ok(())
    } else {
        Err(CliError::invalid(anyhow!("Monte Carlo and analytic values disagree beyond tolerance")))
    }
}

pub fn fit_prior(g: &GlobalArgs, gt: &Path, dets: &Path, out: Option<&Path>) -> CmdResult {
    let ds = load_gt(g, gt)?;
    let d = load_detections(dets)?;
    let matched = match_dataset(&truncate_per_image(&d, g.max_dets), &ds, &grid(g)?)?;
    let table = fit_dataset_priors(&matched);
    let rows = table.to_rows();
    eprintln!(
        "{} cells: {} TP sides fitted, {} FP sides fitted, others uniform",
        rows.len(),
        rows.iter().filter(|r| r.tp_fitted).count(),
        rows.iter().filter(|r| r.fp_fitted).count()
    );
    emit(out, &json_bytes(&rows)?)
}

pub fn surrogate(priors: &Path, threshold: f64, out: Option<&Path>) -> CmdResult {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(CliError::invalid(anyhow!("--threshold must be positive")));
    }
    let rows: Vec<PriorRow> = read_json(priors)?;
    let table = PriorTable::from_rows(&rows)?;
    let sur = fit_surrogates(&table, threshold)?;
    eprintln!(
        "{} cells fitted, {} flagged (numeric path at query time)",
        sur.cells.len(),
        sur.cells.values().filter(|c| c.flagged).count()
    );
    emit(out, &json_bytes(&sur.to_rows())?)
}

pub fn corrupt(g: &GlobalArgs, gt: &Path, p: f64, types: &str, out: &Path, manifest: Option<&Path>) -> CmdResult {
    let kinds = types
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(CorruptionKind::parse)
        .collect::<detgain_core::Result<Vec<_>>>()?;
    let cfg = CorruptionConfig::new(p, kinds, g.seed)?;
    let ds = load_gt(g, gt)?;
    let outcome = corrupt_dataset(&ds, &cfg)?;
    write_atomic(out, &json_bytes(&outcome.dataset.to_coco_json())?)?;
    let manifest_path = match manifest {
        Some(m) => m.to_path_buf(),
        None => PathBuf::from(format!("{}.manifest.json", out.display())),
    };
    write_atomic(&manifest_path, &json_bytes(&outcome.manifest(&cfg))?)?;
    eprintln!("{} of {} images corrupted", outcome.corrupted_image_ids.len(), ds.images.len());
    Ok(())
}
