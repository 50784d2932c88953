//! Multi-negative preference optimization with boundary-negative selection
//! and per-negative dynamic beta, trained over a small embedding recommender.
//!
//! * [`types`]: domain types, seeded randomness, log-ratio arithmetic
//! * [`losses`]: DPO, DMPO, S-DPO-style and MPPO-style objectives with analytic gradients
//! * [`selection`]: violation detection, exact 1-D k-means, boundary selection, S/B partition
//! * [`beta`]: dual margins and the dynamic beta rule
//! * [`policy`]: the toy recommender, Adam, SFT and preference steps, checkpoints
//! * [`data`]: synthetic generation, CSV ingestion, splitting, negative sampling
//! * [`eval`]: HitRatio@1, reward win rate, S/B curves
//! * [`harness`] and [`config`]: experiment runs, sweeps and timing

pub mod beta;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod policy;
pub mod selection;
pub mod types;

pub use beta::{dual_margins, dynamic_beta, BetaConfig, DualMargins};
pub use config::{DataSource, RunConfig};
pub use error::{Error, Result};
pub use losses::{
    dmpo_loss, dpo_loss, mppo_style_loss, neg_gradient_decomposition, objective_loss, sdpo_style_loss, BetaVector,
    LossOutput, Objective,
};
pub use policy::{po_step, sft_step, OptimizerState, PolicyModel, ReferenceModel, Variant};
pub use selection::{
    kmeans_1d_exact, sb_partition, select_boundary, select_boundary_with, violation_set, BoundarySelection,
    SBPartition, Stage, StageSwitches,
};
pub use types::{
    likelihood_gaps, log_ratios, Context, ItemId, LikelihoodRecord, LogRatioSet, PreferenceInstance, RngSeed,
};
