//! Boundary-negative selection.
//!
//! Stage 1 keeps every negative the policy already ranks strictly above the
//! positive. When there is none, stage 2 clusters the negative log-likelihoods
//! into three groups with an exact 1-D k-means and keeps the highest cluster.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::types::LikelihoodRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Stage 1 fired: boundary = negatives with `neg_theta > pos_theta`.
    Violation,
    /// Stage 2: boundary = highest-centroid cluster of a 3-means split.
    Cluster,
    /// Fewer than three negatives; boundary = the single most likely negative.
    Degenerate,
    /// Both stages disabled (ablation) or stage 2 disabled with no violation.
    AllNegatives,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Violation => "violation",
            Stage::Cluster => "cluster",
            Stage::Degenerate => "degenerate",
            Stage::AllNegatives => "all",
        }
    }
}

/// A three-way split of the negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSplit {
    /// Per negative: 0 for the highest cluster, 1 for the middle, 2 for the lowest.
    pub rank: Vec<usize>,
    /// Centroids of the highest, middle and lowest cluster.
    pub centroids: [f64; 3],
}

impl ClusterSplit {
    fn with_rank(&self, r: usize) -> Vec<usize> {
        (0..self.rank.len()).filter(|&i| self.rank[i] == r).collect()
    }

    pub fn top(&self) -> Vec<usize> {
        self.with_rank(0)
    }

    pub fn mid(&self) -> Vec<usize> {
        self.with_rank(1)
    }

    pub fn bot(&self) -> Vec<usize> {
        self.with_rank(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySelection {
    /// Selected negative indices in ascending order. Never empty.
    pub boundary: Vec<usize>,
    pub stage: Stage,
    pub clusters: Option<ClusterSplit>,
}

impl BoundarySelection {
    pub fn len(&self) -> usize {
        self.boundary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundary.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.boundary.binary_search(&i).is_ok()
    }
}

/// Diagnostic split of negatives into well-separated (`S`) and boundary-critical (`B`).
#[derive(Debug, Clone, PartialEq)]
pub struct SBPartition {
    pub s_indices: Vec<usize>,
    pub b_indices: Vec<usize>,
    pub threshold: f64,
}

pub fn violation_set(rec: &LikelihoodRecord) -> Vec<usize> {
    // branch-free count and compaction; the comparison is a coin flip for the predictor
    let count = rec
        .neg_theta
        .iter()
        .map(|&n| (n > rec.pos_theta) as usize)
        .sum::<usize>();
    if count == 0 {
        return Vec::new();
    }
    let mut out = vec![0; count + 1];
    let mut len = 0;
    for (i, &n) in rec.neg_theta.iter().enumerate() {
        out[len] = i;
        len += (n > rec.pos_theta) as usize;
    }
    out.truncate(count);
    out
}

/// Result of [`kmeans_1d_exact`]. Clusters are numbered in ascending centroid order.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1d {
    pub assignments: Vec<usize>,
    pub centroids: Vec<f64>,
    pub wcss: f64,
}

impl KMeans1d {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Per sorted position `p`: prefix sums of the (mean-shifted) values and
/// their squares, `1/p`, and the cost of the first `p` values as one cluster.
#[derive(Clone, Copy)]
struct PrefixRow {
    s1: f64,
    s2: f64,
    inv: f64,
    head: f64,
}

struct Prefix(Vec<PrefixRow>);

impl Prefix {
    fn new(sorted: impl ExactSizeIterator<Item = f64>) -> Self {
        let mut pre = Vec::with_capacity(sorted.len() + 1);
        pre.push(PrefixRow {
            s1: 0.0,
            s2: 0.0,
            inv: 0.0,
            head: 0.0,
        });
        let (mut s1, mut s2) = (0.0, 0.0);
        for (p, x) in sorted.enumerate() {
            s1 += x;
            s2 += x * x;
            let inv = 1.0 / (p + 1) as f64;
            let head = (s2 - s1 * s1 * inv).max(0.0);
            pre.push(PrefixRow { s1, s2, inv, head });
        }
        Self(pre)
    }

    fn n(&self) -> usize {
        self.0.len() - 1
    }

    /// Within-cluster sum of squares of sorted positions `[i, j)`.
    #[inline]
    fn cost(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.0[i], &self.0[j]);
        let s = b.s1 - a.s1;
        (b.s2 - a.s2 - s * s * self.0[j - i].inv).max(0.0)
    }

    /// Optimal cost and cluster boundaries `[0, .., n]` for `k` clusters.
    fn dp_cuts(&self, k: usize) -> (f64, Vec<usize>) {
        let n = self.n();
        let w = n + 1;
        // best[c * w + j]: min cost of the first j sorted values in c + 1 clusters
        let mut best = vec![(f64::INFINITY, 0usize); k * w];
        for (j, cell) in best[..=n + 1 - k].iter_mut().enumerate().skip(1) {
            cell.0 = self.cost(0, j);
        }
        for c in 1..k {
            // the last row only needs its final cell
            let first = if c == k - 1 { n } else { c + 1 };
            for j in first..=n + 1 + c - k {
                let mut b = f64::INFINITY;
                let mut arg = c;
                // descending with strict < keeps the largest split among ties
                for i in (c..j).rev() {
                    let cand = best[(c - 1) * w + i].0 + self.cost(i, j);
                    if cand < b {
                        b = cand;
                        arg = i;
                    }
                }
                best[c * w + j] = (b, arg);
            }
        }
        let mut cuts = vec![0; k + 1];
        cuts[k] = n;
        for c in (1..k).rev() {
            cuts[c] = best[c * w + cuts[c + 1]].1;
        }
        (best[(k - 1) * w + n].0, cuts)
    }

    /// Same result as `dp_cuts(3)`, bit for bit, visiting candidates in the
    /// same order but skipping any whose cost already reaches the running
    /// optimum. Costs are non-negative and rounding is monotone, so a skipped
    /// candidate could never have won.
    fn three_cuts(&self) -> (f64, [usize; 4]) {
        let n = self.n();
        let mut total = f64::INFINITY;
        let (mut lo, mut hi) = (1, 2);
        for j in (2..n).rev() {
            let tail = self.cost(j, n);
            if tail >= total {
                continue;
            }
            let mut b = f64::INFINITY;
            let mut arg = 1;
            let end = self.0[j];
            // i runs from j - 1 down to 1 while the middle length j - i runs up from 1
            let rows = self.0[1..j].iter().rev().zip(&self.0[1..j]);
            for (i, (lo, mid)) in (1..j).rev().zip(rows) {
                if lo.head + tail >= total {
                    continue;
                }
                let s = end.s1 - lo.s1;
                let cand = lo.head + (end.s2 - lo.s2 - s * s * mid.inv).max(0.0);
                if cand < b {
                    b = cand;
                    arg = i;
                }
            }
            if b + tail < total {
                total = b + tail;
                lo = arg;
                hi = j;
            }
        }
        (total, [0, lo, hi, n])
    }
}

/// Globally optimal 1-D k-means by dynamic programming over the sorted values.
///
/// Optimal clusters in one dimension are contiguous runs of the sorted
/// sequence, so the search is over split points only: `O(k n^2)`, pruned
/// for the common `k = 3`. Among
/// partitions with equal cost the one with the smallest highest cluster wins,
/// and recursively for lower clusters.
pub fn kmeans_1d_exact(values: &[f64], k: usize) -> Result<KMeans1d> {
    let n = values.len();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs n >= k >= 1, got n={n}, k={k}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let (sorted, pre) = sorted_prefix(values);
    let (wcss, cuts) = if k == 3 {
        let (w, c) = pre.three_cuts();
        (w, c.to_vec())
    } else {
        pre.dp_cuts(k)
    };

    let mut assignments = vec![0usize; n];
    let mut centroids = vec![0.0; k];
    for c in 0..k {
        let members = &sorted[cuts[c]..cuts[c + 1]];
        for &(_, i) in members {
            assignments[i] = c;
        }
        centroids[c] = members.iter().map(|p| p.0).sum::<f64>() / members.len() as f64;
    }
    Ok(KMeans1d {
        assignments,
        centroids,
        wcss,
    })
}

// ascending by value, equal values in index order, with prefix sums of the
// mean-shifted values
fn sorted_prefix(values: &[f64]) -> (Vec<(f64, usize)>, Prefix) {
    let mut sorted: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let shift = sorted.iter().map(|p| p.0).sum::<f64>() / values.len() as f64;
    let pre = Prefix::new(sorted.iter().map(|p| p.0 - shift));
    (sorted, pre)
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Which selection stages are enabled. The default enables both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSwitches {
    pub violation: bool,
    pub cluster: bool,
}

impl Default for StageSwitches {
    fn default() -> Self {
        Self {
            violation: true,
            cluster: true,
        }
    }
}

pub fn select_boundary(rec: &LikelihoodRecord) -> Result<BoundarySelection> {
    select_boundary_with(rec, StageSwitches::default())
}

/// [`select_boundary`] with individual stages switched off, for ablations.
///
/// Without stage 1 the clustering always runs; without stage 2 a record with
/// no violation keeps all of its negatives; with neither, every negative is kept.
pub fn select_boundary_with(rec: &LikelihoodRecord, switches: StageSwitches) -> Result<BoundarySelection> {
    let (boundary, stage) = boundary_only(rec, switches)?;
    let clusters = if stage == Stage::Cluster {
        let km = kmeans_1d_exact(&rec.neg_theta, 3)?;
        let mut rank = km.assignments;
        rank.iter_mut().for_each(|c| *c = 2 - *c);
        Some(ClusterSplit {
            rank,
            centroids: [km.centroids[2], km.centroids[1], km.centroids[0]],
        })
    } else {
        None
    };
    Ok(BoundarySelection {
        boundary,
        stage,
        clusters,
    })
}

/// Boundary indices and deciding stage, without the cluster split.
pub fn boundary_only(rec: &LikelihoodRecord, switches: StageSwitches) -> Result<(Vec<usize>, Stage)> {
    let k = rec.k();
    if k == 0 {
        return Err(Error::invalid("selection needs at least one negative"));
    }
    if switches.violation {
        let vio = violation_set(rec);
        if !vio.is_empty() {
            return Ok((vio, Stage::Violation));
        }
    }
    if !switches.cluster {
        return Ok(((0..k).collect(), Stage::AllNegatives));
    }
    if k < 3 {
        return Ok((vec![argmax_lowest(&rec.neg_theta)], Stage::Degenerate));
    }
    if rec.neg_theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let (sorted, pre) = sorted_prefix(&rec.neg_theta);
    let (_, cuts) = pre.three_cuts();
    let mut top: Vec<usize> = sorted[cuts[2]..].iter().map(|p| p.1).collect();
    top.sort_unstable();
    Ok((top, Stage::Cluster))
}

/// The `top` most likely negatives (ties to the lower index), ascending by index.
pub fn top_k_negatives(rec: &LikelihoodRecord, top: usize) -> Result<Vec<usize>> {
    let k = rec.k();
    if top == 0 || top > k {
        return Err(Error::invalid(format!("top-K needs 1 <= K <= k, got K={top}, k={k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        rec.neg_theta[b]
            .partial_cmp(&rec.neg_theta[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut chosen = order[..top].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `B = { i : pos_theta - neg_theta[i] <= threshold }`, `S` = the rest.
pub fn sb_partition(rec: &LikelihoodRecord, threshold: f64) -> SBPartition {
    let (b_indices, s_indices): (Vec<usize>, Vec<usize>) =
        (0..rec.k()).partition(|&i| rec.pos_theta - rec.neg_theta[i] <= threshold);
    SBPartition {
        s_indices,
        b_indices,
        threshold,
    }
}
