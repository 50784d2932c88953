//! Preference-optimization objectives and their closed-form gradients with
//! respect to the policy log-likelihoods.
//!
//! Every multi-negative loss takes an `active` index subset and a
//! [`BetaVector`] aligned with it. Negatives outside `active` receive a
//! gradient of exactly zero. Since `r = theta - ref`, derivatives with respect
//! to the log-ratios equal derivatives with respect to the policy
//! log-likelihoods.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, neg_log_sigmoid, sigmoid};
use crate::types::LogRatioSet;

/// Per-negative regularization weights, aligned with an `active` index list.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaVector(Vec<f64>);

impl BetaVector {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::invalid(format!("beta must be finite and > 0, got {b}")));
        }
        Ok(Self(betas))
    }

    pub fn uniform(beta: f64, len: usize) -> Result<Self> {
        Self::new(vec![beta; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// d value / d pos_theta
    pub grad_pos: f64,
    /// d value / d neg_theta[i]; zero for inactive negatives
    pub grad_neg: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Dpo,
    Dmpo,
    Sdpo,
    Mppo,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Dpo, Objective::Dmpo, Objective::Sdpo, Objective::Mppo];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Dpo => "dpo",
            Objective::Dmpo => "dmpo",
            Objective::Sdpo => "sdpo",
            Objective::Mppo => "mppo",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(Objective::Dpo),
            "dmpo" => Ok(Objective::Dmpo),
            "sdpo" | "s-dpo" => Ok(Objective::Sdpo),
            "mppo" => Ok(Objective::Mppo),
            other => Err(Error::invalid(format!("unknown objective `{other}`"))),
        }
    }
}

fn check_active(ratios: &LogRatioSet, betas: &BetaVector, active: &[usize]) -> Result<()> {
    if active.is_empty() {
        return Err(Error::invalid("active negative set is empty"));
    }
    if betas.len() != active.len() {
        return Err(Error::invalid(format!(
            "{} betas for {} active negatives",
            betas.len(),
            active.len()
        )));
    }
    let k = ratios.k();
    let mut seen = vec![false; k];
    for &i in active {
        if i >= k {
            return Err(Error::invalid(format!("active index {i} out of range for k={k}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("active index {i} repeated")));
        }
    }
    Ok(())
}

/// `-log sigma(beta * (r_pos - r_neg))` for a single negative.
pub fn dpo_loss(ratios: &LogRatioSet, beta: f64) -> Result<LossOutput> {
    if ratios.k() != 1 {
        return Err(Error::invalid(format!(
            "dpo expects exactly one negative, got {}",
            ratios.k()
        )));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::invalid(format!("beta must be finite and > 0, got {beta}")));
    }
    let z = beta * (ratios.r_pos - ratios.r_neg[0]);
    let s = sigmoid(-z);
    Ok(LossOutput {
        value: neg_log_sigmoid(z),
        grad_pos: -beta * s,
        grad_neg: vec![beta * s],
    })
}

/// Argument of the sigmoid in [`dmpo_loss`]:
/// `(1/|A|) * sum_{i in A} beta_i * (r_pos - r_neg[i])`.
pub fn dmpo_margin(ratios: &LogRatioSet, betas: &BetaVector, active: &[usize]) -> Result<f64> {
    check_active(ratios, betas, active)?;
    let m = active.len() as f64;
    Ok(active
        .iter()
        .zip(betas.as_slice())
        .map(|(&i, b)| b * (ratios.r_pos - ratios.r_neg[i]))
        .sum::<f64>()
        / m)
}

/// Multi-negative DPO: a single sigmoid over the beta-weighted mean reward margin.
pub fn dmpo_loss(ratios: &LogRatioSet, betas: &BetaVector, active: &[usize]) -> Result<LossOutput> {
    let z = dmpo_margin(ratios, betas, active)?;
    let m = active.len() as f64;
    let s = sigmoid(-z);
    let mut grad_neg = vec![0.0; ratios.k()];
    for (&i, b) in active.iter().zip(betas.as_slice()) {
        grad_neg[i] = s * b / m;
    }
    Ok(LossOutput {
        value: neg_log_sigmoid(z),
        grad_pos: -s * betas.mean(),
        grad_neg,
    })
}

/// Softmax-over-negatives objective:
/// `-log sigma(-log sum_{i in A} exp(beta_i * (r_neg[i] - r_pos)))`.
pub fn sdpo_style_loss(ratios: &LogRatioSet, betas: &BetaVector, active: &[usize]) -> Result<LossOutput> {
    check_active(ratios, betas, active)?;
    let terms: Vec<f64> = active
        .iter()
        .zip(betas.as_slice())
        .map(|(&i, b)| b * (ratios.r_neg[i] - ratios.r_pos))
        .collect();
    let lse = log_sum_exp(&terms);
    // value = softplus(lse); d value / d lse = sigma(lse)
    let outer = sigmoid(lse);
    let mut grad_neg = vec![0.0; ratios.k()];
    let mut grad_pos = 0.0;
    for ((&i, b), t) in active.iter().zip(betas.as_slice()).zip(&terms) {
        let w = (t - lse).exp();
        grad_neg[i] = outer * b * w;
        grad_pos -= outer * b * w;
    }
    Ok(LossOutput {
        value: neg_log_sigmoid(-lse),
        grad_pos,
        grad_neg,
    })
}

/// Mean of pairwise DPO losses over the active negatives.
pub fn mppo_style_loss(ratios: &LogRatioSet, betas: &BetaVector, active: &[usize]) -> Result<LossOutput> {
    check_active(ratios, betas, active)?;
    let m = active.len() as f64;
    let mut value = 0.0;
    let mut grad_pos = 0.0;
    let mut grad_neg = vec![0.0; ratios.k()];
    for (&i, b) in active.iter().zip(betas.as_slice()) {
        let z = b * (ratios.r_pos - ratios.r_neg[i]);
        let s = sigmoid(-z);
        value += neg_log_sigmoid(z);
        grad_pos -= b * s / m;
        grad_neg[i] = b * s / m;
    }
    Ok(LossOutput {
        value: value / m,
        grad_pos,
        grad_neg,
    })
}

/// Dispatch on [`Objective`]. DPO requires a single-negative ratio set with one active index.
pub fn objective_loss(
    objective: Objective,
    ratios: &LogRatioSet,
    betas: &BetaVector,
    active: &[usize],
) -> Result<LossOutput> {
    match objective {
        Objective::Dpo => {
            check_active(ratios, betas, active)?;
            dpo_loss(ratios, betas.as_slice()[0])
        }
        Objective::Dmpo => dmpo_loss(ratios, betas, active),
        Objective::Sdpo => sdpo_style_loss(ratios, betas, active),
        Objective::Mppo => mppo_style_loss(ratios, betas, active),
    }
}

/// Split of the mean negative gradient into its S and B contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientDecomposition {
    /// `(|S|/k) * mean_S`
    pub s_term: f64,
    /// `(|B|/k) * mean_B`
    pub b_term: f64,
    pub reconstruction: f64,
}

pub fn neg_gradient_decomposition(
    grad_neg: &[f64],
    s_indices: &[usize],
    b_indices: &[usize],
) -> Result<GradientDecomposition> {
    let k = grad_neg.len();
    if k == 0 {
        return Err(Error::invalid("empty gradient"));
    }
    let mut owner = vec![0u8; k];
    for &i in s_indices.iter().chain(b_indices) {
        if i >= k {
            return Err(Error::invalid(format!("partition index {i} out of range")));
        }
        owner[i] += 1;
    }
    if owner.iter().any(|&c| c != 1) {
        return Err(Error::invalid("S and B must be disjoint and cover every negative"));
    }
    let kf = k as f64;
    let weighted = |idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let n = idx.len() as f64;
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        let mean = sorted.iter().map(|&i| grad_neg[i]).sum::<f64>() / n;
        n / kf * mean
    };
    let s_term = weighted(s_indices);
    let b_term = weighted(b_indices);
    Ok(GradientDecomposition {
        s_term,
        b_term,
        reconstruction: s_term + b_term,
    })
}
