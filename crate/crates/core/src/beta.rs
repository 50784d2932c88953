//! Dual margins and per-negative dynamic beta.

use crate::error::{Error, Result};
use crate::types::LikelihoodRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualMargins {
    /// `l_plus - l_b`: how ambiguous the boundary negative is.
    pub delta_p: f64,
    /// `l_b - l_e`: how far the boundary negative sits above the easy ones.
    pub delta_n: f64,
    pub l_plus: f64,
    pub l_b: f64,
    pub l_e: f64,
}

impl DualMargins {
    pub fn from_likelihoods(l_plus: f64, l_b: f64, l_e: f64) -> Self {
        Self {
            delta_p: l_plus - l_b,
            delta_n: l_b - l_e,
            l_plus,
            l_b,
            l_e,
        }
    }

    /// Margins given directly, without the underlying likelihoods.
    pub fn from_deltas(delta_p: f64, delta_n: f64) -> Self {
        Self {
            delta_p,
            delta_n,
            l_plus: delta_p,
            l_b: 0.0,
            l_e: -delta_n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaConfig {
    pub beta0: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for BetaConfig {
    fn default() -> Self {
        Self {
            beta0: 1.0,
            alpha: 0.5,
            gamma: 6.0,
        }
    }
}

impl BetaConfig {
    pub fn new(beta0: f64, alpha: f64, gamma: f64) -> Result<Self> {
        let cfg = Self { beta0, alpha, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta0.is_finite() && self.beta0 > 0.0) {
            return Err(Error::invalid(format!("beta0 must be > 0, got {}", self.beta0)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        Ok(())
    }
}

/// Margins of the boundary negative `b_index` relative to the positive and to
/// the mean log-likelihood of the negatives outside `boundary`.
///
/// When `boundary` covers every negative there is no easy reference and
/// `l_e = l_b`, so `delta_n = 0`.
pub fn dual_margins(rec: &LikelihoodRecord, boundary: &[usize], b_index: usize) -> Result<DualMargins> {
    if !boundary.contains(&b_index) {
        return Err(Error::invalid(format!("index {b_index} is not in the boundary set")));
    }
    let l_e = easy_mean(rec, boundary)?;
    let l_b = rec.neg_theta[b_index];
    Ok(DualMargins::from_likelihoods(rec.pos_theta, l_b, l_e.unwrap_or(l_b)))
}

/// Mean `neg_theta` outside `boundary`; `None` when the complement is empty.
fn easy_mean(rec: &LikelihoodRecord, boundary: &[usize]) -> Result<Option<f64>> {
    let k = rec.k();
    let mut stack = [0u64; 1];
    let mut heap;
    let mask: &mut [u64] = if k <= 64 {
        &mut stack
    } else {
        heap = vec![0u64; k.div_ceil(64)];
        &mut heap
    };
    for &i in boundary {
        if i >= k {
            return Err(Error::invalid(format!("index {i} out of range for k={k}")));
        }
        mask[i / 64] |= 1 << (i % 64);
    }
    // adding v * 0.0 leaves the sum unchanged and keeps the loop branch-free
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, v) in rec.neg_theta.iter().enumerate() {
        let keep = (mask[i / 64] >> (i % 64)) & 1 ^ 1;
        sum += v * keep as f64;
        count += keep as usize;
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Dynamic beta for every member of `boundary`, in order.
pub fn boundary_betas(rec: &LikelihoodRecord, boundary: &[usize], cfg: &BetaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let l_e = easy_mean(rec, boundary)?;
    let mut out = Vec::with_capacity(boundary.len());
    for &i in boundary {
        let l_b = rec.neg_theta[i];
        out.push(beta_from(rec.pos_theta - l_b, l_b - l_e.unwrap_or(l_b), cfg)?);
    }
    Ok(out)
}

/// `beta0 * (1 + alpha * tanh((delta_p - delta_n - gamma) / (|delta_p| + |delta_n|)))`,
/// or `beta0` when both margins are zero.
pub fn dynamic_beta(m: &DualMargins, cfg: &BetaConfig) -> Result<f64> {
    cfg.validate()?;
    beta_from(m.delta_p, m.delta_n, cfg)
}

// libm tanh is several times slower than one exp; this stays monotone and is
// within a few ulp of 1 near the saturated ends, ~1e-16 absolute elsewhere
#[inline]
fn tanh(x: f64) -> f64 {
    let t = (-2.0 * x.abs()).exp();
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

#[inline]
fn beta_from(delta_p: f64, delta_n: f64, cfg: &BetaConfig) -> Result<f64> {
    let denom = delta_p.abs() + delta_n.abs();
    if denom == 0.0 {
        return Ok(cfg.beta0);
    }
    let arg = (delta_p - delta_n - cfg.gamma) / denom;
    if !arg.is_finite() {
        return Err(Error::NonFinite(format!(
            "dynamic beta argument for margins ({delta_p}, {delta_n})"
        )));
    }
    let beta = cfg.beta0 * (1.0 + cfg.alpha * tanh(arg));
    if cfg.alpha == 0.0 {
        return Ok(beta);
    }
    // tanh rounds to +-1 for |arg| beyond ~19; keep beta inside the open band
    let lo = cfg.beta0 * (1.0 - cfg.alpha);
    let hi = cfg.beta0 * (1.0 + cfg.alpha);
    Ok(if beta <= lo {
        lo.next_up()
    } else if beta >= hi {
        hi.next_down()
    } else {
        beta
    })
}
