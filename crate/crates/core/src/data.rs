//! Interaction logs, chronological splits and candidate sampling.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;
use crate::types::{stream, Context, ItemId, PreferenceInstance, RngSeed};

pub const CSV_HEADER: &str = "user_id,item_id,timestamp";
pub const EVAL_DISTRACTORS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

/// A canonical interaction log.
///
/// Users and items are dense. Rows are sorted by `(user, timestamp, item)` and
/// item ids are numbered in order of first appearance in that ordering, so
/// exporting and re-ingesting reproduces the log exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    rows: Vec<Interaction>,
    vocab_size: usize,
    user_count: usize,
}

impl InteractionLog {
    /// Canonicalize rows whose users are already dense. Within a user, rows
    /// with equal timestamps keep their given order when items are relabeled.
    fn canonicalize(mut rows: Vec<Interaction>) -> Self {
        // stable: ties keep input order
        rows.sort_by_key(|r| (r.user, r.timestamp));
        let mut relabel: HashMap<u32, u32> = HashMap::new();
        for r in &mut rows {
            let next = relabel.len() as u32;
            r.item = *relabel.entry(r.item).or_insert(next);
        }
        rows.sort();
        let user_count = rows.last().map_or(0, |r| r.user as usize + 1);
        Self {
            vocab_size: relabel.len(),
            user_count,
            rows,
        }
    }

    pub fn rows(&self) -> &[Interaction] {
        &self.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Per-user item sequences in chronological order.
    pub fn sequences(&self) -> Vec<Vec<ItemId>> {
        let mut seqs = vec![Vec::new(); self.user_count];
        for r in &self.rows {
            seqs[r.user as usize].push(ItemId(r.item));
        }
        seqs
    }

    /// Interaction count per item.
    pub fn item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.vocab_size];
        for r in &self.rows {
            counts[r.item as usize] += 1;
        }
        counts
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::with_capacity(16 * (self.rows.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.user, r.item, r.timestamp));
        }
        s
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub interactions_per_user: usize,
    /// Scale of per-draw Gaussian logit noise. Large values wash out user taste.
    pub noise: f64,
    pub temperature: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            dim: 8,
            interactions_per_user: 20,
            noise: 0.5,
            temperature: 1.0,
        }
    }
}

/// Latent-factor interaction generator.
///
/// User and item factors are standard normal. Each user draws
/// `interactions_per_user` distinct items in sequence, each time from
/// `softmax(user . item / temperature + noise * eps)` restricted to items the
/// user has not taken yet, with fresh `eps ~ N(0, 1)` per item and draw.
/// Timestamps are sequence positions.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: RngSeed) -> Result<InteractionLog> {
    if cfg.users == 0 || cfg.items < 2 || cfg.dim == 0 || cfg.interactions_per_user == 0 {
        return Err(Error::invalid("synthetic counts must be positive (items >= 2)"));
    }
    if cfg.interactions_per_user > cfg.items {
        return Err(Error::invalid(format!(
            "interactions_per_user {} exceeds item count {}",
            cfg.interactions_per_user, cfg.items
        )));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) || !(cfg.temperature.is_finite() && cfg.temperature > 0.0) {
        return Err(Error::invalid("noise must be >= 0 and temperature > 0"));
    }
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut factor_rng = seed.derive(&[stream::SYNTHETIC, 0]).rng();
    let item_factors: Vec<f64> = (0..cfg.items * cfg.dim)
        .map(|_| normal.sample(&mut factor_rng))
        .collect();

    let mut rows = Vec::with_capacity(cfg.users * cfg.interactions_per_user);
    for user in 0..cfg.users {
        let mut rng = seed.derive(&[stream::SYNTHETIC, 1, user as u64]).rng();
        let uf: Vec<f64> = (0..cfg.dim).map(|_| normal.sample(&mut rng)).collect();
        let affinity: Vec<f64> = item_factors
            .chunks_exact(cfg.dim)
            .map(|v| v.iter().zip(&uf).map(|(a, b)| a * b).sum::<f64>() / cfg.temperature)
            .collect();
        let mut taken = vec![false; cfg.items];
        let mut logits = vec![0.0; cfg.items];
        for t in 0..cfg.interactions_per_user {
            for j in 0..cfg.items {
                logits[j] = if taken[j] {
                    f64::NEG_INFINITY
                } else {
                    affinity[j] + cfg.noise * normal.sample(&mut rng)
                };
            }
            let item = sample_softmax(&logits, &mut rng);
            taken[item] = true;
            rows.push(Interaction {
                user: user as u32,
                item: item as u32,
                timestamp: t as i64,
            });
        }
    }
    Ok(InteractionLog::canonicalize(rows))
}

fn sample_softmax<R: Rng>(logits: &[f64], rng: &mut R) -> usize {
    let lz = log_sum_exp(logits);
    let mut u: f64 = rng.random();
    let mut last = 0;
    for (j, l) in logits.iter().enumerate() {
        if *l == f64::NEG_INFINITY {
            continue;
        }
        let p = (l - lz).exp();
        if u < p {
            return j;
        }
        u -= p;
        last = j;
    }
    last
}

/// Parse a `user_id,item_id,timestamp` CSV. Raw user ids are densified in
/// order of first appearance; item ids by first appearance after a stable
/// per-user sort by timestamp.
pub fn ingest_csv(path: &Path) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<InteractionLog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != ["user_id", "item_id", "timestamp"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{CSV_HEADER}`, found `{}`", header.join(",")),
        });
    }
    let mut users: HashMap<i64, u32> = HashMap::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<i64> {
            record[i].parse::<i64>().map_err(|_| Error::Parse {
                line,
                message: format!("{name} `{}` is not an integer", &record[i]),
            })
        };
        let user = field(0, "user_id")?;
        let item = field(1, "item_id")?;
        let timestamp = field(2, "timestamp")?;
        let item = u32::try_from(item).map_err(|_| Error::Parse {
            line,
            message: format!("item_id {item} out of range"),
        })?;
        let next = users.len() as u32;
        let user = *users.entry(user).or_insert(next);
        rows.push(Interaction { user, item, timestamp });
    }
    Ok(InteractionLog::canonicalize(rows))
}

/// One prediction target: the item at `position` in a user's sequence and the
/// `history_len` items before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub context: Context,
    pub positive: ItemId,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<SplitEntry>,
    pub valid: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
    /// Every item each user interacted with, sorted.
    pub user_items: Vec<Vec<ItemId>>,
    pub vocab_size: usize,
    pub kept_users: usize,
    pub dropped_users: usize,
}

/// Per-user chronological split of prediction targets.
///
/// With `T` targets (positions `history_len..n`), train takes
/// `max(1, floor(f_train T))`, test takes `max(1, floor(f_test T))` and valid
/// the remainder, in that positional order. Users with fewer than
/// `history_len + 3` interactions are dropped.
pub fn chronological_split(
    log: &InteractionLog,
    fractions: (f64, f64, f64),
    history_len: usize,
) -> Result<DatasetSplit> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must be in [0, 1] and sum to 1"));
    }
    if history_len == 0 {
        return Err(Error::invalid("history_len must be positive"));
    }
    let seqs = log.sequences();
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        user_items: Vec::with_capacity(seqs.len()),
        vocab_size: log.vocab_size(),
        kept_users: 0,
        dropped_users: 0,
    };
    for (user, seq) in seqs.iter().enumerate() {
        let mut items = seq.clone();
        items.sort_unstable();
        items.dedup();
        split.user_items.push(items);
        if seq.len() < history_len + 3 {
            split.dropped_users += 1;
            continue;
        }
        split.kept_users += 1;
        let targets = seq.len() - history_len;
        let n_train = ((ft * targets as f64).floor() as usize).max(1);
        let n_test = ((fs * targets as f64).floor() as usize).max(1);
        let n_train = n_train.min(targets - n_test);
        for (t, pos) in (history_len..seq.len()).enumerate() {
            let entry = SplitEntry {
                context: Context {
                    user: user as u32,
                    history: seq[pos - history_len..pos].to_vec(),
                },
                positive: seq[pos],
                position: pos,
            };
            if t < n_train {
                split.train.push(entry);
            } else if t < targets - n_test {
                split.valid.push(entry);
            } else {
                split.test.push(entry);
            }
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeSampling {
    #[default]
    Uniform,
    /// Proportional to interaction count (plus one).
    Popularity,
}

impl NegativeSampling {
    pub fn name(self) -> &'static str {
        match self {
            NegativeSampling::Uniform => "uniform",
            NegativeSampling::Popularity => "popularity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NegativeSampling::Uniform),
            "popularity" => Ok(NegativeSampling::Popularity),
            _ => Err(Error::invalid(format!("unknown negative sampling `{s}`"))),
        }
    }
}

/// Draw `k` distinct negatives the user never interacted with.
///
/// `weights` (one per item) switches to weighted sampling without replacement.
pub fn sample_negatives(
    entry: &SplitEntry,
    user_items: &[ItemId],
    vocab_size: usize,
    k: usize,
    seed: RngSeed,
    weights: Option<&[f64]>,
) -> Result<PreferenceInstance> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let eligible: Vec<ItemId> = (0..vocab_size)
        .map(ItemId::from)
        .filter(|i| *i != entry.positive && user_items.binary_search(i).is_err())
        .collect();
    if eligible.len() < k {
        return Err(Error::invalid(format!(
            "only {} eligible negatives for k={k} (user {})",
            eligible.len(),
            entry.context.user
        )));
    }
    let mut rng = seed
        .derive(&[stream::NEGATIVES, entry.context.user as u64, entry.position as u64])
        .rng();
    let picks: Vec<usize> = match weights {
        None => index::sample(&mut rng, eligible.len(), k).into_vec(),
        Some(w) => {
            let ew: Vec<f64> = eligible.iter().map(|i| w[i.index()]).collect();
            index::sample_weighted(&mut rng, eligible.len(), |i| ew[i], k)
                .map_err(|e| Error::invalid(format!("weighted sampling failed: {e}")))?
                .into_vec()
        }
    };
    PreferenceInstance::new(
        entry.context.clone(),
        entry.positive,
        picks.into_iter().map(|p| eligible[p]).collect(),
    )
}

/// Sampling weights for [`NegativeSampling::Popularity`].
pub fn popularity_weights(log: &InteractionLog) -> Vec<f64> {
    log.item_counts().into_iter().map(|c| c as f64 + 1.0).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCandidateSet {
    pub positive: ItemId,
    pub distractors: Vec<ItemId>,
}

impl EvalCandidateSet {
    pub fn candidates(&self) -> impl Iterator<Item = ItemId> + '_ {
        std::iter::once(self.positive).chain(self.distractors.iter().copied())
    }
}

/// Twenty distinct distractors drawn uniformly from every item but the positive.
pub fn build_eval_candidates(entry: &SplitEntry, vocab_size: usize, seed: RngSeed) -> Result<EvalCandidateSet> {
    if vocab_size <= EVAL_DISTRACTORS + 1 {
        return Err(Error::invalid(format!(
            "vocab_size {vocab_size} too small for {EVAL_DISTRACTORS} distractors"
        )));
    }
    if entry.positive.index() >= vocab_size {
        return Err(Error::invalid("positive outside vocabulary"));
    }
    let mut rng = seed
        .derive(&[stream::CANDIDATES, entry.context.user as u64, entry.position as u64])
        .rng();
    let pos = entry.positive.index();
    let distractors = index::sample(&mut rng, vocab_size - 1, EVAL_DISTRACTORS)
        .into_iter()
        .map(|j| ItemId::from(if j >= pos { j + 1 } else { j }))
        .collect();
    Ok(EvalCandidateSet {
        positive: entry.positive,
        distractors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            users: 30,
            items: 40,
            dim: 4,
            interactions_per_user: 15,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_sized() {
        let a = generate_synthetic(&small_cfg(), RngSeed(42)).unwrap();
        let b = generate_synthetic(&small_cfg(), RngSeed(42)).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        assert_eq!(a.len(), 30 * 15);
        let c = generate_synthetic(&small_cfg(), RngSeed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_bad_counts() {
        let mut cfg = small_cfg();
        cfg.users = 0;
        assert!(generate_synthetic(&cfg, RngSeed(1)).is_err());
        let mut cfg = small_cfg();
        cfg.interactions_per_user = 41;
        assert!(generate_synthetic(&cfg, RngSeed(1)).is_err());
    }

    #[test]
    fn ingest_small_file() {
        let log = parse_csv("user_id,item_id,timestamp\n10,5,3\n10,7,1\n11,5,2\n").unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.vocab_size(), 2);
        assert_eq!(log.user_count(), 2);
        // user 10 sorted by time: 7 then 5
        assert_eq!(log.sequences()[0], vec![ItemId(0), ItemId(1)]);
        assert_eq!(log.rows()[0].timestamp, 1);
    }

    #[test]
    fn ingest_reports_line_numbers() {
        match parse_csv("user_id,item_id,timestamp\n1,2,3\na,b,c\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv("user_id,item_id,timestamp\n1,2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_csv("user,item,ts\n1,2,3\n").is_err());
    }

    #[test]
    fn export_reingest_is_identity() {
        let log = generate_synthetic(&small_cfg(), RngSeed(7)).unwrap();
        let back = parse_csv(&log.to_csv_string()).unwrap();
        assert_eq!(back, log);
        let messy = parse_csv("user_id,item_id,timestamp\n9,100,5\n3,7,1\n9,7,5\n9,4,2\n3,100,0\n").unwrap();
        assert_eq!(parse_csv(&messy.to_csv_string()).unwrap(), messy);
    }

    #[test]
    fn split_arithmetic() {
        let mut csv = String::from("user_id,item_id,timestamp\n");
        for t in 0..13 {
            csv.push_str(&format!("0,{t},{t}\n"));
        }
        for t in 0..5 {
            csv.push_str(&format!("1,{t},{t}\n"));
        }
        let log = parse_csv(&csv).unwrap();
        let s = chronological_split(&log, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        assert_eq!((s.kept_users, s.dropped_users), (1, 1));
        assert_eq!(s.train[0].context.history, vec![ItemId(0), ItemId(1), ItemId(2)]);
        assert_eq!(s.train[0].positive, ItemId(3));
        assert!(s.train.last().unwrap().position < s.valid[0].position);
        assert!(s.valid[0].position < s.test[0].position);

        let empty = parse_csv("user_id,item_id,timestamp\n").unwrap();
        let s = chronological_split(&empty, (0.8, 0.1, 0.1), 3).unwrap();
        assert!(s.train.is_empty() && s.test.is_empty());
        assert_eq!(s.dropped_users, 0);
    }

    fn entry(user: u32, history: &[u32], positive: u32) -> SplitEntry {
        SplitEntry {
            context: Context::new(user, history.iter().map(|&i| ItemId(i)).collect()).unwrap(),
            positive: ItemId(positive),
            position: history.len(),
        }
    }

    #[test]
    fn negatives_forced_set() {
        let e = entry(0, &[0], 1);
        let inst = sample_negatives(&e, &[ItemId(0), ItemId(1)], 17, 15, RngSeed(1), None).unwrap();
        let mut got: Vec<u32> = inst.negatives.iter().map(|i| i.0).collect();
        got.sort_unstable();
        assert_eq!(got, (2..17).collect::<Vec<_>>());
        assert!(sample_negatives(&e, &[ItemId(0), ItemId(1)], 17, 16, RngSeed(1), None).is_err());
    }

    #[test]
    fn negatives_are_deterministic_and_valid() {
        let e = entry(3, &[4, 8], 9);
        let items = [ItemId(4), ItemId(8), ItemId(9), ItemId(20)];
        let a = sample_negatives(&e, &items, 100, 15, RngSeed(5), None).unwrap();
        let b = sample_negatives(&e, &items, 100, 15, RngSeed(5), None).unwrap();
        assert_eq!(a, b);
        assert!(a.negatives.iter().all(|n| !items.contains(n)));
        let w: Vec<f64> = (0..100).map(|i| 1.0 + i as f64).collect();
        let c = sample_negatives(&e, &items, 100, 15, RngSeed(5), Some(&w)).unwrap();
        assert!(c.negatives.iter().all(|n| !items.contains(n)));
    }

    #[test]
    fn eval_candidates_contract() {
        let e = entry(1, &[2, 3], 7);
        let a = build_eval_candidates(&e, 50, RngSeed(3)).unwrap();
        assert_eq!(a.candidates().count(), 21);
        assert_eq!(a, build_eval_candidates(&e, 50, RngSeed(3)).unwrap());
        assert!(build_eval_candidates(&e, 21, RngSeed(3)).is_err());
        for s in 0..10_000u64 {
            let c = build_eval_candidates(&e, 22, RngSeed(s)).unwrap();
            assert!(!c.distractors.contains(&e.positive));
            let mut d = c.distractors.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), EVAL_DISTRACTORS);
        }
    }
}
