//! Shared domain types, seeded randomness and log-ratio arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index into an item vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ItemId {
    fn from(v: usize) -> Self {
        ItemId(v as u32)
    }
}

/// A user together with their recent interaction history (most recent last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub user: u32,
    pub history: Vec<ItemId>,
}

impl Context {
    pub fn new(user: u32, history: Vec<ItemId>) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::invalid("context history must be non-empty"));
        }
        Ok(Self { user, history })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.history.is_empty() {
            return Err(Error::invalid("context history must be non-empty"));
        }
        if let Some(bad) = self.history.iter().find(|i| i.index() >= vocab_size) {
            return Err(Error::invalid(format!(
                "history item {} outside vocabulary of size {vocab_size}",
                bad.0
            )));
        }
        Ok(())
    }
}

/// One training instance: a context, the observed next item, and `k` sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceInstance {
    pub context: Context,
    pub positive: ItemId,
    pub negatives: Vec<ItemId>,
}

impl PreferenceInstance {
    pub fn new(context: Context, positive: ItemId, negatives: Vec<ItemId>) -> Result<Self> {
        let inst = Self {
            context,
            positive,
            negatives,
        };
        inst.check_shape()?;
        Ok(inst)
    }

    fn check_shape(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::invalid("instance needs at least one negative"));
        }
        if self.negatives.contains(&self.positive) {
            return Err(Error::invalid("positive item appears among negatives"));
        }
        let mut sorted = self.negatives.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("negatives must be pairwise distinct"));
        }
        Ok(())
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.context.validate(vocab_size)?;
        self.check_shape()?;
        if self.positive.index() >= vocab_size || self.negatives.iter().any(|n| n.index() >= vocab_size) {
            return Err(Error::invalid("instance item outside vocabulary"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.negatives.len()
    }
}

/// Policy and reference log-likelihoods for the positive and every negative of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodRecord {
    pub pos_theta: f64,
    pub pos_ref: f64,
    pub neg_theta: Vec<f64>,
    pub neg_ref: Vec<f64>,
}

impl LikelihoodRecord {
    pub fn new(pos_theta: f64, pos_ref: f64, neg_theta: Vec<f64>, neg_ref: Vec<f64>) -> Result<Self> {
        let rec = Self {
            pos_theta,
            pos_ref,
            neg_theta,
            neg_ref,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.neg_theta.len() != self.neg_ref.len() {
            return Err(Error::invalid(format!(
                "negative list lengths differ: theta {} vs ref {}",
                self.neg_theta.len(),
                self.neg_ref.len()
            )));
        }
        let all = [self.pos_theta, self.pos_ref]
            .into_iter()
            .chain(self.neg_theta.iter().copied())
            .chain(self.neg_ref.iter().copied());
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("likelihood record entry {v}")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.neg_theta.len()
    }
}

/// `log(pi_theta / pi_ref)` for the positive and each negative.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRatioSet {
    pub r_pos: f64,
    pub r_neg: Vec<f64>,
}

impl LogRatioSet {
    pub fn k(&self) -> usize {
        self.r_neg.len()
    }
}

pub fn log_ratios(rec: &LikelihoodRecord) -> LogRatioSet {
    LogRatioSet {
        r_pos: rec.pos_theta - rec.pos_ref,
        r_neg: rec.neg_theta.iter().zip(&rec.neg_ref).map(|(t, r)| t - r).collect(),
    }
}

/// Positive-minus-negative gaps under the policy only. Non-positive entries are
/// negatives the policy ranks at or above the positive.
pub fn likelihood_gaps(rec: &LikelihoodRecord) -> Vec<f64> {
    rec.neg_theta.iter().map(|n| rec.pos_theta - n).collect()
}

/// Run seed. Sub-streams are derived by hashing the seed with integer tags so
/// that every stochastic operation is reproducible in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSeed(pub u64);

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngSeed {
    pub fn derive(self, tags: &[u64]) -> RngSeed {
        let mut s = splitmix64(self.0);
        for &t in tags {
            s = splitmix64(s ^ splitmix64(t));
        }
        RngSeed(s)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Stream tags for [`RngSeed::derive`].
pub mod stream {
    pub const SYNTHETIC: u64 = 1;
    pub const INIT: u64 = 2;
    pub const NEGATIVES: u64 = 3;
    pub const CANDIDATES: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rec(pt: f64, pr: f64, nt: &[f64], nr: &[f64]) -> LikelihoodRecord {
        LikelihoodRecord::new(pt, pr, nt.to_vec(), nr.to_vec()).unwrap()
    }

    #[test]
    fn ratios_at_reference_are_zero() {
        let r = log_ratios(&rec(-1.0, -1.0, &[-2.0], &[-2.0]));
        assert_eq!(r.r_pos, 0.0);
        assert_eq!(r.r_neg, vec![0.0]);
    }

    #[test]
    fn ratios_subtract() {
        let r = log_ratios(&rec(-1.0, -2.0, &[-3.0], &[-1.0]));
        assert_eq!(r.r_pos, 1.0);
        assert_eq!(r.r_neg, vec![-2.0]);
    }

    #[test]
    fn gaps() {
        assert_eq!(
            likelihood_gaps(&rec(-1.0, 0.0, &[-1.0, -4.0], &[0.0, 0.0])),
            vec![0.0, 3.0]
        );
        assert_eq!(likelihood_gaps(&rec(-2.0, 0.0, &[-1.0], &[0.0])), vec![-1.0]);
        assert_eq!(
            likelihood_gaps(&rec(-3.0, -3.0, &[-3.0, -3.0], &[-3.0, -3.0])),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn record_rejects_mismatched_lengths_and_nan() {
        assert!(LikelihoodRecord::new(-1.0, -1.0, vec![-1.0], vec![]).is_err());
        assert!(LikelihoodRecord::new(f64::NAN, -1.0, vec![-1.0], vec![-1.0]).is_err());
    }

    #[test]
    fn instance_shape_checks() {
        let ctx = Context::new(0, vec![ItemId(1)]).unwrap();
        assert!(PreferenceInstance::new(ctx.clone(), ItemId(2), vec![ItemId(2)]).is_err());
        assert!(PreferenceInstance::new(ctx.clone(), ItemId(2), vec![ItemId(3), ItemId(3)]).is_err());
        assert!(PreferenceInstance::new(ctx.clone(), ItemId(2), vec![]).is_err());
        let ok = PreferenceInstance::new(ctx, ItemId(2), vec![ItemId(3), ItemId(4)]).unwrap();
        assert!(ok.validate(5).is_ok());
        assert!(ok.validate(4).is_err());
        assert!(Context::new(0, vec![]).is_err());
    }

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let s = RngSeed(42);
        let a: u64 = s.derive(&[1, 2]).rng().random();
        let b: u64 = s.derive(&[1, 2]).rng().random();
        let c: u64 = s.derive(&[2, 1]).rng().random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest::proptest! {
        #[test]
        fn shift_leaves_ratios_unchanged(
            vals in proptest::collection::vec(-20.0f64..0.0, 4..12),
            c in -5.0f64..5.0,
        ) {
            let k = (vals.len() - 2) / 2;
            let base = rec(vals[0], vals[1], &vals[2..2 + k], &vals[2 + k..2 + 2 * k]);
            let shifted = rec(
                vals[0] + c,
                vals[1] + c,
                &vals[2..2 + k].iter().map(|v| v + c).collect::<Vec<_>>(),
                &vals[2 + k..2 + 2 * k].iter().map(|v| v + c).collect::<Vec<_>>(),
            );
            let a = log_ratios(&base);
            let b = log_ratios(&shifted);
            proptest::prop_assert!((a.r_pos - b.r_pos).abs() < 1e-12);
            for (x, y) in a.r_neg.iter().zip(&b.r_neg) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn gaps_ignore_reference(
            theta in proptest::collection::vec(-20.0f64..0.0, 2..10),
            noise in -5.0f64..5.0,
        ) {
            let k = theta.len() - 1;
            let a = rec(theta[0], -1.0, &theta[1..], &vec![-1.0; k]);
            let b = rec(theta[0], -1.0 + noise, &theta[1..], &vec![-1.0 - noise; k]);
            proptest::prop_assert_eq!(likelihood_gaps(&a), likelihood_gaps(&b));
        }
    }
}
