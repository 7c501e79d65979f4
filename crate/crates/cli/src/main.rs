//! `detgain`: per-image marginal mAP scoring, selection and verification.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const GT_SCHEMA: &str = "\
Ground truth (--gt): COCO annotation JSON
  {\"images\": [{\"id\", \"width\", \"height\"}],
   \"annotations\": [{\"id\", \"image_id\", \"category_id\", \"bbox\": [x, y, w, h], \"iscrowd\": 0|1}],
   \"categories\": [{\"id\", \"name\"}]}
  Crowd annotations are dropped; boxes are clipped to the image.";

const DETS_SCHEMA: &str = "\
Detections (--teacher, --student, --dets): COCO results JSON
  [{\"image_id\", \"category_id\", \"bbox\": [x, y, w, h], \"score\": 0..1}]
  At most --max-dets highest-scoring detections per image are kept.";

const SCORES_SCHEMA: &str = "\
Scores CSV: header image_id,delta_teacher,delta_student,learnability";

const PRIOR_SCHEMA: &str = "\
Prior/surrogate JSON: array of rows
  {\"class\", \"tau\", \"alpha_tp\", \"beta_tp\", \"alpha_fp\", \"beta_fp\", \"T\", \"F\", \"gt\",
   \"tp_fitted\", \"fp_fitted\", \"coeffs_tp\": [7] | null, \"coeffs_fp\": [7] | null,
   \"residual\": real | null, \"flagged\": bool}
  Coefficients are in increasing powers of the score.";

#[derive(Parser, Debug)]
#[command(name = "detgain", version, about = "Per-image marginal mAP scoring for detection data curation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Worker threads (default: logical cores)
    #[arg(long, global = true, env = "DETGAIN_THREADS")]
    pub threads: Option<usize>,

    /// RNG seed
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// IoU thresholds as start:stop:step
    #[arg(long, global = true, default_value = "0.5:0.95:0.05")]
    pub tau_grid: String,

    /// Detections kept per image, highest score first
    #[arg(long, global = true, default_value_t = 100)]
    pub max_dets: usize,

    /// Machine-readable format for --out
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// Write the annotation load report here instead of stderr
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Clone)]
pub struct ScoringArgs {
    /// Marginal model: uniform, beta-table or surrogate
    #[arg(long, default_value = "uniform")]
    pub prior: String,

    /// Prior or surrogate file from fit-prior/surrogate; fitted from the teacher dump when omitted
    #[arg(long)]
    pub prior_file: Option<PathBuf>,

    /// Pool counts: dataset (student dump) or fixed-ratio
    #[arg(long, default_value = "dataset")]
    pub stats: String,

    /// TP:FP ratio for --stats fixed-ratio
    #[arg(long, default_value = "1:9")]
    pub tf_ratio: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every image: teacher and student marginal mAP and their gap
    #[command(after_long_help = format!("{GT_SCHEMA}\n\n{DETS_SCHEMA}\n\nOutput: {SCORES_SCHEMA}\n  (--format json writes an array of the same records)"))]
    Score {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// Output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Stream seeded super-batches over a scores file and keep the top fraction
    #[command(after_long_help = format!("Input: {SCORES_SCHEMA}\n\nOutput JSONL: one object per iteration\n  {{\"iter\", \"superbatch\": [ids], \"selected\": [ids]}}"))]
    Select {
        #[arg(long)]
        scores: PathBuf,
        /// Fraction of each super-batch kept, in (0, 1]
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value_t = 80)]
        superbatch: usize,
        /// Iterations (default: one epoch)
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Run the selection loop and report selection statistics
    #[command(after_long_help = format!("{GT_SCHEMA}\n\n{DETS_SCHEMA}\n\nCorruption manifest (--corruption-manifest): as written by `corrupt`\n  {{\"probability\", \"seed\", \"enabled\": [..], \"corrupted_image_ids\": [..]}}\n\nOutput JSON: {{\"summary\": {{..}}, \"trace\": {{\"iterations\": [{{\"iter\", \"epoch\", \"superbatch\", \"records\", \"selected\"}}], \"selection_counts\", \"class_histogram\"}}}}"))]
    Simulate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value_t = 80)]
        superbatch: usize,
        #[arg(long)]
        iters: usize,
        #[arg(long)]
        corruption_manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Exact mAP change from adding each image to the rest, next to the closed-form estimate
    #[command(after_long_help = format!("{GT_SCHEMA}\n\n{DETS_SCHEMA}\n\nOutput CSV: image_id,exact,estimate (json: array of the same records)"))]
    ExactDelta {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        /// Images to evaluate (repeatable; default: all)
        #[arg(long = "image")]
        images: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Monte Carlo check of the analytic insertion marginals on one cell
    #[command(after_long_help = "Prints an aligned table per insertion kind; --out writes the same reports as JSON.\nExit code 1 when any score misses max(1e-3, 3 standard errors).")]
    VerifyMc {
        #[arg(long)]
        tp: bool,
        #[arg(long)]
        fp: bool,
        /// Score prior: uniform or beta:a_tp,b_tp,a_fp,b_fp
        #[arg(long, default_value = "uniform")]
        dist: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long = "T", default_value_t = 800)]
        t: u64,
        #[arg(long = "F", default_value_t = 9200)]
        f: u64,
        #[arg(long = "T-gt", default_value_t = 1000)]
        t_gt: u64,
        /// Number of insertion scores evenly spaced in [0.01, 0.99]
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Fit per-(class, threshold) Beta score priors from a detection dump
    #[command(after_long_help = format!("{GT_SCHEMA}\n\n{DETS_SCHEMA}\n\nOutput: {PRIOR_SCHEMA}"))]
    FitPrior {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Fit degree-6 polynomial surrogates to a prior table
    #[command(after_long_help = format!("Input and output: {PRIOR_SCHEMA}"))]
    Surrogate {
        #[arg(long)]
        priors: PathBuf,
        /// Maximum fit residual before a cell is flagged
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Write a corrupted copy of an annotation file and its manifest
    #[command(after_long_help = format!("{GT_SCHEMA}\n\nOutput: annotation JSON of the same schema. Manifest (--manifest, default <out>.manifest.json):\n  {{\"probability\", \"seed\", \"enabled\": [..], \"corrupted_image_ids\": [..]}}"))]
    Corrupt {
        #[arg(long)]
        gt: PathBuf,
        /// Probability that an image is corrupted
        #[arg(long)]
        p: f64,
        /// Comma-separated subset of jitter,label_noise,deletion,fake_boxes
        #[arg(long, default_value = "jitter,label_noise,deletion,fake_boxes")]
        types: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> output::CmdResult {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(output::CliError::invalid(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(output::CliError::invalid)?;
    }
    match cli.command {
        Command::Score { gt, teacher, student, scoring, out } => {
            commands::score(g, &gt, &teacher, &student, &scoring, out.as_deref())
        }
        Command::Select { scores, ratio, superbatch, iters, out } => {
            commands::select(g, &scores, ratio, superbatch, iters, out.as_deref())
        }
        Command::Simulate { gt, teacher, student, scoring, ratio, superbatch, iters, corruption_manifest, out } => {
            commands::simulate(
                g,
                &commands::SimulateInputs { gt, teacher, student, corruption_manifest },
                &scoring,
                ratio,
                superbatch,
                iters,
                out.as_deref(),
            )
        }
        Command::ExactDelta { gt, dets, images, out } => commands::exact_delta(g, &gt, &dets, &images, out.as_deref()),
        Command::VerifyMc { tp, fp, dist, trials, t, f, t_gt, points, out } => {
            commands::verify_mc(g, tp, fp, &dist, trials, (t, f, t_gt), points, out.as_deref())
        }
        Command::FitPrior { gt, dets, out } => commands::fit_prior(g, &gt, &dets, out.as_deref()),
        Command::Surrogate { priors, threshold, out } => commands::surrogate(&priors, threshold, out.as_deref()),
        Command::Corrupt { gt, p, types, out, manifest } => {
            commands::corrupt(g, &gt, p, &types, &out, manifest.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
