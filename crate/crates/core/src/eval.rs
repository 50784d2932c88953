//! Ranking and reward metrics, S/B proportion tracking.
//!
//! Both hit and win metrics use strict comparisons: ties count against the model.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::EvalCandidateSet;
use crate::error::{Error, Result};
use crate::policy::{PolicyModel, ReferenceModel};
use crate::selection::sb_partition;
use crate::types::{Context, LikelihoodRecord, PreferenceInstance};

/// Fraction of entries whose positive strictly outscores all distractors.
pub fn hit_ratio_at_1(model: &PolicyModel, entries: &[(Context, EvalCandidateSet)]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::invalid("hit ratio needs at least one test entry"));
    }
    let hits = entries
        .par_iter()
        .map(|(ctx, cands)| -> Result<bool> {
            let lp = model.log_probs(ctx)?;
            let get = |i: crate::types::ItemId| {
                lp.get(i.index())
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("candidate {} outside vocabulary", i.0)))
            };
            let pos = get(cands.positive)?;
            for d in &cands.distractors {
                if get(*d)? >= pos {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / entries.len() as f64)
}

/// Fraction of instances where `beta0 * log(pi/pi_ref)` of the positive
/// strictly exceeds that of every negative.
pub fn reward_win_rate(
    model: &PolicyModel,
    reference: &ReferenceModel,
    instances: &[PreferenceInstance],
    beta0: f64,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::invalid("win rate needs at least one instance"));
    }
    if !(beta0.is_finite() && beta0 > 0.0) {
        return Err(Error::invalid("beta0 must be > 0"));
    }
    let wins = instances
        .par_iter()
        .map(|inst| -> Result<bool> {
            let rec = crate::policy::likelihood_record(model, reference, inst)?;
            Ok(record_wins(&rec, beta0))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(wins.iter().filter(|&&w| w).count() as f64 / instances.len() as f64)
}

pub fn record_wins(rec: &LikelihoodRecord, beta0: f64) -> bool {
    let r_pos = beta0 * (rec.pos_theta - rec.pos_ref);
    rec.neg_theta
        .iter()
        .zip(&rec.neg_ref)
        .all(|(t, r)| r_pos > beta0 * (t - r))
}

/// Fraction of negatives in `B` at each checkpoint.
pub fn sb_proportion_curve(checkpoints: &[(f64, Vec<LikelihoodRecord>)], threshold: f64) -> Result<Vec<(f64, f64)>> {
    if checkpoints.len() < 2 {
        return Err(Error::invalid("S/B curve needs at least two checkpoints"));
    }
    if checkpoints.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::invalid("checkpoint progress must be ascending"));
    }
    Ok(checkpoints
        .iter()
        .map(|(progress, recs)| (*progress, b_fraction(recs, threshold)))
        .collect())
}

pub fn b_fraction(recs: &[LikelihoodRecord], threshold: f64) -> f64 {
    let total: usize = recs.iter().map(|r| r.k()).sum();
    if total == 0 {
        return 0.0;
    }
    let b: usize = recs.iter().map(|r| sb_partition(r, threshold).b_indices.len()).sum();
    b as f64 / total as f64
}

/// Arithmetic mean of logged selection sizes.
pub fn mean_selected_negatives(sizes: &[usize]) -> Result<f64> {
    if sizes.is_empty() {
        return Err(Error::invalid("no selections logged"));
    }
    Ok(sizes.iter().sum::<usize>() as f64 / sizes.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub hit_ratio_at_1: f64,
    pub reward_win_rate: f64,
    /// `(progress fraction, B fraction)`
    pub sb_proportions: Vec<(f64, f64)>,
    pub per_step_seconds: f64,
    pub epoch_losses: Vec<f64>,
}

impl MetricsReport {
    /// `progress,b_fraction,s_fraction` rows.
    pub fn sb_curve_csv(&self) -> String {
        let mut s = String::from("progress,b_fraction,s_fraction\n");
        for (p, b) in &self.sb_proportions {
            let _ = writeln!(s, "{p},{b},{}", 1.0 - b);
        }
        s
    }
}
