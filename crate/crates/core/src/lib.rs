//! Per-image marginal mAP scoring for object-detection data curation.
//!
//! Images are scored by the estimated change in dataset mAP from adding their
//! detections to a frozen pool, using closed-form insertion marginals under a
//! uniform score prior, numeric marginals under fitted Beta priors, or
//! polynomial surrogates of the latter. An exact AP evaluator and a Monte
//! Carlo simulator serve as references.

pub mod closedform;
pub mod curation;
pub mod error;
pub mod exactap;
pub mod ingest;
pub mod matching;
pub mod model;
pub mod montecarlo;
pub mod priors;
pub mod synthetic;

pub use closedform::{
    delta_ap_fp_uniform, delta_ap_tp_uniform, image_detgain, learnability, InsertionKind,
    MarginalModel, UniformClosedForm,
};
pub use curation::{
    batch_detgain, run_simulation, score_superbatch, select_topk, CurationConfig, Curator,
    PriorMode, SelectionTrace, SimulationSummary,
};
pub use error::{Error, Result};
pub use exactap::{ap_single, exact_delta_map, map_exact, ApReport};
pub use ingest::{
    load_detections, load_ground_truth, CorruptionConfig, CorruptionKind, Dataset, ImageInfo,
};
pub use matching::{iou, match_dataset, match_image};
pub use model::*;
pub use montecarlo::{mc_delta_ap, mc_report, McConfig, McEstimate, McReport};
pub use priors::{
    delta_ap_numeric, fit_beta_mle, fit_beta_mom, fit_dataset_priors, fit_surrogates,
    BetaParams, BetaTableModel, PolySurrogate, PriorRow, PriorTable,
};
