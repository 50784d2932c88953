//! Experiment orchestration: dataset preparation, the SFT and preference
//! stages, run directories, sweeps and timing comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{DataSource, RunConfig};
use crate::data::{
    build_eval_candidates, chronological_split, generate_synthetic, ingest_csv, popularity_weights, sample_negatives,
    DatasetSplit, EvalCandidateSet, InteractionLog, NegativeSampling, SplitEntry,
};
use crate::error::{Error, Result};
use crate::eval::{
    b_fraction, hit_ratio_at_1, mean_selected_negatives, reward_win_rate, sb_proportion_curve, MetricsReport,
};
use crate::losses::Objective;
use crate::policy::{likelihood_record, po_step, sft_step, OptimizerState, PolicyModel, ReferenceModel, Variant};
use crate::selection::Stage;
use crate::types::{stream, Context, ItemId, LikelihoodRecord, PreferenceInstance, RngSeed};

const SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);
const TAG_TRAIN_NEG: u64 = 10;
const TAG_TEST_NEG: u64 = 11;
const TAG_EVAL: u64 = 12;
const TAG_VALID_EVAL: u64 = 13;

pub fn load_log(cfg: &RunConfig) -> Result<InteractionLog> {
    match &cfg.data {
        DataSource::Synthetic(s) => generate_synthetic(s, RngSeed(cfg.seed)),
        DataSource::Csv(path) => ingest_csv(path),
    }
}

/// A dataset split with its fixed evaluation material.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub log: InteractionLog,
    pub split: DatasetSplit,
    pub weights: Option<Vec<f64>>,
    pub test_eval: Vec<(Context, EvalCandidateSet)>,
    pub valid_eval: Vec<(Context, EvalCandidateSet)>,
    /// Test targets with `k` sampled negatives, for the reward win rate.
    pub test_instances: Vec<PreferenceInstance>,
}

fn eval_sets(entries: &[SplitEntry], vocab: usize, seed: RngSeed) -> Result<Vec<(Context, EvalCandidateSet)>> {
    entries
        .iter()
        .map(|e| Ok((e.context.clone(), build_eval_candidates(e, vocab, seed)?)))
        .collect()
}

impl Prepared {
    pub fn new(cfg: &RunConfig, log: InteractionLog) -> Result<Self> {
        let split = chronological_split(&log, SPLIT, cfg.history_len)?;
        if split.train.is_empty() || split.test.is_empty() {
            return Err(Error::invalid(format!(
                "dataset has no usable users for history_len={} ({} dropped)",
                cfg.history_len, split.dropped_users
            )));
        }
        let weights = match cfg.negative_sampling {
            NegativeSampling::Uniform => None,
            NegativeSampling::Popularity => Some(popularity_weights(&log)),
        };
        let seed = RngSeed(cfg.seed);
        let test_eval = eval_sets(&split.test, split.vocab_size, seed.derive(&[TAG_EVAL]))?;
        let valid_eval = eval_sets(&split.valid, split.vocab_size, seed.derive(&[TAG_VALID_EVAL]))?;
        let mut prepared = Self {
            log,
            split,
            weights,
            test_eval,
            valid_eval,
            test_instances: Vec::new(),
        };
        prepared.test_instances = prepared.instances(&prepared.split.test, cfg.k, seed.derive(&[TAG_TEST_NEG]))?;
        Ok(prepared)
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg, load_log(cfg)?)
    }

    pub fn vocab_size(&self) -> usize {
        self.split.vocab_size
    }

    pub fn instances(&self, entries: &[SplitEntry], k: usize, seed: RngSeed) -> Result<Vec<PreferenceInstance>> {
        entries
            .par_iter()
            .map(|e| {
                sample_negatives(
                    e,
                    &self.split.user_items[e.context.user as usize],
                    self.vocab_size(),
                    k,
                    seed,
                    self.weights.as_deref(),
                )
            })
            .collect()
    }

    pub fn train_instances(&self, cfg: &RunConfig, epoch: usize) -> Result<Vec<PreferenceInstance>> {
        let e = if cfg.fixed_negatives { 0 } else { epoch as u64 };
        self.instances(&self.split.train, cfg.k, RngSeed(cfg.seed).derive(&[TAG_TRAIN_NEG, e]))
    }
}

fn shuffled<T: Clone>(items: &[T], seed: RngSeed) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut seed.rng());
    v
}

fn dump_batch(dir: Option<&Path>, stage: &str, batch_desc: &str) {
    if let Some(dir) = dir {
        let _ = fs::create_dir_all(dir);
        let _ = fs::write(dir.join("nan_dump.txt"), format!("stage = {stage}\n{batch_desc}"));
    }
}

/// Supervised next-item stage. Returns the trained model and per-epoch mean losses.
pub fn run_sft(cfg: &RunConfig, prepared: &Prepared, dump_dir: Option<&Path>) -> Result<(PolicyModel, Vec<f64>)> {
    let mut model = PolicyModel::new(prepared.vocab_size(), cfg.dim, RngSeed(cfg.seed))?;
    let mut opt = OptimizerState::new(&model, cfg.sft_lr);
    let pairs: Vec<(Context, ItemId)> = prepared
        .split
        .train
        .iter()
        .map(|e| (e.context.clone(), e.positive))
        .collect();
    let mut losses = Vec::with_capacity(cfg.sft_epochs);
    for epoch in 0..cfg.sft_epochs {
        let order = shuffled(&pairs, RngSeed(cfg.seed).derive(&[stream::SHUFFLE, 0, epoch as u64]));
        let mut total = 0.0;
        let mut n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            match sft_step(&mut model, batch, &mut opt) {
                Ok(loss) => {
                    total += loss * batch.len() as f64;
                    n += batch.len();
                }
                Err(e @ Error::NonFinite(_)) => {
                    dump_batch(dump_dir, "sft", &format!("epoch = {epoch}\nbatch = {batch:?}\n"));
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        losses.push(total / n as f64);
    }
    Ok((model, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoEpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_hit_ratio: f64,
    pub mean_selected: f64,
    /// Fractions of instances by selection stage: violation, cluster, degenerate, all/none.
    pub stage_fractions: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoOutcome {
    pub model: PolicyModel,
    pub epochs: Vec<PoEpochStats>,
    pub sb_curve: Vec<(f64, f64)>,
    pub step_seconds: Vec<f64>,
    pub selection_sizes: Vec<usize>,
}

fn probe_records(
    model: &PolicyModel,
    reference: &ReferenceModel,
    probe: &[PreferenceInstance],
) -> Result<Vec<LikelihoodRecord>> {
    probe
        .par_iter()
        .map(|i| likelihood_record(model, reference, i))
        .collect()
}

/// Preference stage starting from `model`, against the frozen `reference`.
pub fn run_po(
    cfg: &RunConfig,
    prepared: &Prepared,
    mut model: PolicyModel,
    reference: &ReferenceModel,
    dump_dir: Option<&Path>,
) -> Result<PoOutcome> {
    let mut opt = OptimizerState::new(&model, cfg.po_lr);
    let probe = prepared.train_instances(cfg, 0)?;
    let steps_per_epoch = probe.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.po_epochs;
    let checkpoints: Vec<usize> = (0..=cfg.sb_intervals)
        .map(|j| (j * total_steps + cfg.sb_intervals / 2) / cfg.sb_intervals)
        .collect();
    let mut sb_points: Vec<(f64, Vec<LikelihoodRecord>)> = Vec::new();
    let mut next_cp = 0usize;
    let mut step = 0usize;
    let mut step_seconds = Vec::with_capacity(total_steps);
    let mut selection_sizes = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.po_epochs);

    let record_cp = |step: usize,
                     model: &PolicyModel,
                     next_cp: &mut usize,
                     points: &mut Vec<(f64, Vec<LikelihoodRecord>)>|
     -> Result<()> {
        while *next_cp < checkpoints.len() && checkpoints[*next_cp] == step {
            let progress = *next_cp as f64 / cfg.sb_intervals as f64;
            points.push((progress, probe_records(model, reference, &probe)?));
            *next_cp += 1;
        }
        Ok(())
    };

    for epoch in 0..cfg.po_epochs {
        let instances = if epoch == 0 {
            probe.clone()
        } else {
            prepared.train_instances(cfg, epoch)?
        };
        let order = shuffled(
            &instances,
            RngSeed(cfg.seed).derive(&[stream::SHUFFLE, 1, epoch as u64]),
        );
        let mut total = 0.0;
        let mut n = 0usize;
        let mut stage_counts = [0usize; 4];
        let mut epoch_sizes = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            record_cp(step, &model, &mut next_cp, &mut sb_points)?;
            let t0 = Instant::now();
            let out = po_step(
                &mut model,
                reference,
                batch,
                cfg.objective,
                cfg.variant,
                &cfg.beta,
                &mut opt,
            );
            step_seconds.push(t0.elapsed().as_secs_f64());
            let out = match out {
                Ok(o) => o,
                Err(e @ Error::NonFinite(_)) => {
                    dump_batch(
                        dump_dir,
                        "po",
                        &format!("epoch = {epoch}\nstep = {step}\nbatch = {batch:?}\n"),
                    );
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            total += out.mean_loss * batch.len() as f64;
            n += batch.len();
            for inst in &out.instances {
                let size = inst.selection.active.len();
                selection_sizes.push(size);
                epoch_sizes += size;
                let slot = match inst.stage() {
                    Some(Stage::Violation) => 0,
                    Some(Stage::Cluster) => 1,
                    Some(Stage::Degenerate) => 2,
                    Some(Stage::AllNegatives) | None => 3,
                };
                stage_counts[slot] += 1;
            }
            step += 1;
        }
        let valid_hit_ratio = if prepared.valid_eval.is_empty() {
            f64::NAN
        } else {
            hit_ratio_at_1(&model, &prepared.valid_eval)?
        };
        epochs.push(PoEpochStats {
            epoch,
            mean_loss: total / n as f64,
            valid_hit_ratio,
            mean_selected: epoch_sizes as f64 / n as f64,
            stage_fractions: stage_counts.map(|c| c as f64 / n as f64),
        });
    }
    record_cp(step, &model, &mut next_cp, &mut sb_points)?;
    let sb_curve = if sb_points.len() >= 2 {
        sb_proportion_curve(&sb_points, cfg.sb_threshold)?
    } else {
        sb_points
            .iter()
            .map(|(p, r)| (*p, b_fraction(r, cfg.sb_threshold)))
            .collect()
    };
    Ok(PoOutcome {
        model,
        epochs,
        sb_curve,
        step_seconds,
        selection_sizes,
    })
}

/// Headline numbers of a run. Deterministic for a given config.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub objective: Objective,
    pub variant: Variant,
    pub k: usize,
    pub beta0: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
    pub sft_final_loss: f64,
    pub sft_hit_ratio_at_1: f64,
    pub po_final_loss: f64,
    pub hit_ratio_at_1: f64,
    pub reward_win_rate: f64,
    pub mean_selected_negatives: f64,
    pub b_fraction_start: f64,
    pub b_fraction_end: f64,
    pub train_instances: usize,
    pub test_entries: usize,
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "objective",
    "variant",
    "k",
    "beta0",
    "alpha",
    "gamma",
    "seed",
    "sft_final_loss",
    "sft_hit_ratio_at_1",
    "po_final_loss",
    "hit_ratio_at_1",
    "reward_win_rate",
    "mean_selected_negatives",
    "b_fraction_start",
    "b_fraction_end",
    "train_instances",
    "test_entries",
];

impl Summary {
    pub fn values(&self) -> Vec<String> {
        vec![
            self.objective.name().to_string(),
            self.variant.name(),
            self.k.to_string(),
            self.beta0.to_string(),
            self.alpha.to_string(),
            self.gamma.to_string(),
            self.seed.to_string(),
            self.sft_final_loss.to_string(),
            self.sft_hit_ratio_at_1.to_string(),
            self.po_final_loss.to_string(),
            self.hit_ratio_at_1.to_string(),
            self.reward_win_rate.to_string(),
            self.mean_selected_negatives.to_string(),
            self.b_fraction_start.to_string(),
            self.b_fraction_end.to_string(),
            self.train_instances.to_string(),
            self.test_entries.to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", SUMMARY_COLUMNS.join(","), self.values().join(","))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub sft_losses: Vec<f64>,
    pub reference: ReferenceModel,
    pub po: PoOutcome,
    pub summary: Summary,
}

impl RunOutcome {
    pub fn metrics_report(&self) -> MetricsReport {
        MetricsReport {
            hit_ratio_at_1: self.summary.hit_ratio_at_1,
            reward_win_rate: self.summary.reward_win_rate,
            sb_proportions: self.po.sb_curve.clone(),
            per_step_seconds: self.mean_step_seconds(),
            epoch_losses: self.po.epochs.iter().map(|e| e.mean_loss).collect(),
        }
    }

    pub fn mean_step_seconds(&self) -> f64 {
        let s = &self.po.step_seconds;
        if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    }
}

/// SFT, reference snapshot, preference stage and final metrics, in memory.
pub fn train(cfg: &RunConfig, prepared: &Prepared, dump_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let (sft_model, sft_losses) = run_sft(cfg, prepared, dump_dir)?;
    let sft_hit = hit_ratio_at_1(&sft_model, &prepared.test_eval)?;
    train_from_sft(cfg, prepared, sft_model, sft_losses, sft_hit, dump_dir)
}

/// The stages after SFT, starting from an already fine-tuned model.
pub fn train_from_sft(
    cfg: &RunConfig,
    prepared: &Prepared,
    sft_model: PolicyModel,
    sft_losses: Vec<f64>,
    sft_hit: f64,
    dump_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let reference = sft_model.snapshot();
    let po = run_po(cfg, prepared, sft_model, &reference, dump_dir)?;
    let hit = hit_ratio_at_1(&po.model, &prepared.test_eval)?;
    let win = reward_win_rate(&po.model, &reference, &prepared.test_instances, cfg.beta.beta0)?;
    let mean_sel = if po.selection_sizes.is_empty() {
        0.0
    } else {
        mean_selected_negatives(&po.selection_sizes)?
    };
    let summary = Summary {
        objective: cfg.objective,
        variant: cfg.variant,
        k: cfg.k,
        beta0: cfg.beta.beta0,
        alpha: cfg.beta.alpha,
        gamma: cfg.beta.gamma,
        seed: cfg.seed,
        sft_final_loss: sft_losses.last().copied().unwrap_or(f64::NAN),
        sft_hit_ratio_at_1: sft_hit,
        po_final_loss: po.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        hit_ratio_at_1: hit,
        reward_win_rate: win,
        mean_selected_negatives: mean_sel,
        b_fraction_start: po.sb_curve.first().map_or(f64::NAN, |p| p.1),
        b_fraction_end: po.sb_curve.last().map_or(f64::NAN, |p| p.1),
        train_instances: prepared.split.train.len(),
        test_entries: prepared.split.test.len(),
    };
    Ok(RunOutcome {
        config: cfg.clone(),
        sft_losses,
        reference,
        po,
        summary,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn epoch_metrics_csv(out: &RunOutcome) -> String {
    let mut s = String::from(
        "stage,epoch,mean_loss,valid_hit_ratio,mean_selected_negatives,violation_frac,cluster_frac,degenerate_frac,all_frac\n",
    );
    for (e, l) in out.sft_losses.iter().enumerate() {
        let _ = writeln!(s, "sft,{e},{l},,,,,,");
    }
    for ep in &out.po.epochs {
        let [v, c, d, a] = ep.stage_fractions;
        let _ = writeln!(
            s,
            "po,{},{},{},{},{v},{c},{d},{a}",
            ep.epoch, ep.mean_loss, ep.valid_hit_ratio, ep.mean_selected
        );
    }
    s
}

/// Write a run directory. `timing.csv` holds wall-clock measurements and is
/// the only file that differs between identical re-runs.
pub fn write_run(out: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.txt"), out.config.to_text())?;
    out.reference.model().save(&dir.join("reference.ckpt"))?;
    out.po.model.save(&dir.join("final.ckpt"))?;
    write_file(&dir.join("epoch_metrics.csv"), epoch_metrics_csv(out))?;
    write_file(&dir.join("sb_curve.csv"), out.metrics_report().sb_curve_csv())?;
    write_file(&dir.join("summary.csv"), out.summary.to_csv())?;
    let steps = out.po.step_seconds.len();
    let total: f64 = out.po.step_seconds.iter().sum();
    write_file(
        &dir.join("timing.csv"),
        format!(
            "po_steps,mean_step_seconds,total_po_seconds\n{steps},{},{total}\n",
            out.mean_step_seconds()
        ),
    )?;
    Ok(())
}

/// `generate`: write `interactions.csv` and `manifest.txt` to `dir`.
pub fn cmd_generate(cfg: &RunConfig, dir: &Path) -> Result<InteractionLog> {
    let syn = match &cfg.data {
        DataSource::Synthetic(s) => s,
        DataSource::Csv(_) => return Err(Error::invalid("generate needs `data = synthetic`")),
    };
    let log = generate_synthetic(syn, RngSeed(cfg.seed))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    log.export_csv(&dir.join("interactions.csv"))?;
    let manifest = format!(
        "seed = {}\nusers = {}\nitems = {}\nlatent_dim = {}\ninteractions_per_user = {}\nnoise = {}\ntemperature = {}\nrows = {}\nuser_count = {}\nvocab_size = {}\n",
        cfg.seed,
        syn.users,
        syn.items,
        syn.dim,
        syn.interactions_per_user,
        syn.noise,
        syn.temperature,
        log.len(),
        log.user_count(),
        log.vocab_size()
    );
    write_file(&dir.join("manifest.txt"), manifest)?;
    Ok(log)
}

/// `train`: full pipeline into `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let prepared = Prepared::load(cfg)?;
    let out = train(cfg, &prepared, Some(&cfg.output_dir))?;
    write_run(&out, &cfg.output_dir)?;
    Ok(out)
}

/// One configuration in a sweep, with the value of the swept axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub axis_value: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub axis: String,
    pub entries: Vec<GridEntry>,
}

fn parse_list<T: std::str::FromStr>(values: &str) -> Result<Vec<T>> {
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad grid value `{v}`")))
        })
        .collect()
}

pub const GRID_KINDS: &[&str] = &["k", "ablation", "topk", "alpha", "gamma", "objectives"];

impl ExperimentGrid {
    /// Build a named grid around `base`. `values` overrides the default axis values.
    ///
    /// * `k`: k in {3,5,...,15} x {naive, dynamicpo}
    /// * `ablation`: full, without stage 1, without stage 2, without both, without dynamic beta
    /// * `topk`: top-K for K in {2,3,4}, then dynamicpo
    /// * `alpha`, `gamma`: dynamicpo across the given values
    /// * `objectives`: {dmpo, sdpo, mppo} x {naive, dynamicpo}
    pub fn build(base: &RunConfig, kind: &str, values: Option<&str>) -> Result<Self> {
        let with = |axis_value: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            GridEntry { axis_value, config: c }
        };
        let entries: Vec<GridEntry> = match kind {
            "k" => {
                let ks: Vec<usize> = match values {
                    Some(v) => parse_list(v)?,
                    None => vec![3, 5, 7, 9, 11, 13, 15],
                };
                let mut out = Vec::new();
                for variant in [Variant::Naive, Variant::DYNAMIC_PO] {
                    for &k in &ks {
                        out.push(with(k.to_string(), &|c| {
                            c.k = k;
                            c.variant = variant;
                        }));
                    }
                }
                out
            }
            "ablation" => [
                ("full", Variant::DYNAMIC_PO),
                ("without-stage1", Variant::ABLATE_STAGE1),
                ("without-stage2", Variant::ABLATE_STAGE2),
                ("without-stages", Variant::ABLATE_BOTH_STAGES),
                ("without-dynamic-beta", Variant::ABLATE_BETA),
            ]
            .into_iter()
            .map(|(label, v)| with(label.to_string(), &|c| c.variant = v))
            .collect(),
            "topk" => {
                let ks: Vec<usize> = match values {
                    Some(v) => parse_list(v)?,
                    None => vec![2, 3, 4],
                };
                let mut out: Vec<GridEntry> = ks
                    .iter()
                    .map(|&k| with(format!("topk{k}"), &|c| c.variant = Variant::TopK(k)))
                    .collect();
                out.push(with("dynamicpo".into(), &|c| c.variant = Variant::DYNAMIC_PO));
                out
            }
            "alpha" | "gamma" => {
                let vals: Vec<f64> = match (values, kind) {
                    (Some(v), _) => parse_list(v)?,
                    (None, "alpha") => vec![0.1, 0.3, 0.5, 0.7, 0.9],
                    (None, _) => vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
                };
                vals.iter()
                    .map(|&x| {
                        with(x.to_string(), &|c| {
                            c.variant = Variant::DYNAMIC_PO;
                            if kind == "alpha" {
                                c.beta.alpha = x;
                            } else {
                                c.beta.gamma = x;
                            }
                        })
                    })
                    .collect()
            }
            "objectives" => {
                let objs: Vec<Objective> = match values {
                    Some(v) => parse_list(v)?,
                    None => vec![Objective::Dmpo, Objective::Sdpo, Objective::Mppo],
                };
                let mut out = Vec::new();
                for &o in &objs {
                    for variant in [Variant::Naive, Variant::DYNAMIC_PO] {
                        out.push(with(o.name().to_string(), &|c| {
                            c.objective = o;
                            c.variant = variant;
                        }));
                    }
                }
                out
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown grid `{other}` (expected one of {})",
                    GRID_KINDS.join(", ")
                )))
            }
        };
        Ok(Self {
            axis: kind.to_string(),
            entries,
        })
    }
}

pub const SWEEP_PREFIX: &[&str] = &["axis", "axis_value", "run_dir", "status"];

/// `sweep`: run every grid entry into `dir/NNN_<variant>_<value>/`, then
/// aggregate their `summary.csv` files into `dir/sweep.csv`. A failing entry
/// is recorded in its row and does not stop the sweep.
pub fn cmd_sweep(grid: &ExperimentGrid, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let run_dirs: Vec<String> = grid
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{i:03}_{}_{}", e.config.variant.name(), e.axis_value))
        .collect();

    grid.entries.par_iter().zip(&run_dirs).for_each(|(entry, name)| {
        let run_dir = dir.join(name);
        let mut cfg = entry.config.clone();
        cfg.output_dir = run_dir.clone();
        let result = cfg
            .validate()
            .and_then(|_| Prepared::load(&cfg))
            .and_then(|p| train(&cfg, &p, Some(&run_dir)))
            .and_then(|out| write_run(&out, &run_dir));
        if let Err(e) = result {
            let _ = fs::create_dir_all(&run_dir);
            let _ = fs::write(run_dir.join("error.txt"), format!("{}: {e}\n", e.kind()));
        }
    });

    let mut csv = format!("{},{}\n", SWEEP_PREFIX.join(","), SUMMARY_COLUMNS.join(","));
    for (entry, name) in grid.entries.iter().zip(&run_dirs) {
        let run_dir = dir.join(name);
        let summary = fs::read_to_string(run_dir.join("summary.csv"));
        let (status, values) = match summary {
            Ok(text) => match text.lines().nth(1) {
                Some(row) => ("ok".to_string(), row.to_string()),
                None => ("error:corrupt-summary".to_string(), String::new()),
            },
            Err(_) => {
                let reason = fs::read_to_string(run_dir.join("error.txt")).unwrap_or_default();
                let kind = reason.split(':').next().unwrap_or("unknown").trim().to_string();
                (format!("error:{kind}"), String::new())
            }
        };
        let values = if values.is_empty() {
            vec![""; SUMMARY_COLUMNS.len()].join(",")
        } else {
            values
        };
        let _ = writeln!(csv, "{},{},{},{status},{values}", grid.axis, entry.axis_value, name);
    }
    write_file(&dir.join("sweep.csv"), &csv)?;
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub naive_step_seconds: f64,
    pub dynamic_step_seconds: f64,
    pub steps: usize,
    pub repeats: usize,
}

impl TimingReport {
    /// `(dynamic - naive) / naive`
    pub fn overhead(&self) -> f64 {
        (self.dynamic_step_seconds - self.naive_step_seconds) / self.naive_step_seconds
    }

    pub fn to_csv(&self) -> String {
        format!(
            "naive_step_seconds,dynamic_step_seconds,overhead_ratio,steps,repeats\n{},{},{},{},{}\n",
            self.naive_step_seconds,
            self.dynamic_step_seconds,
            self.overhead(),
            self.steps,
            self.repeats
        )
    }
}

/// Per-step wall time of naive versus DynamicPO preference training from the
/// same SFT model and seed. Both variants train in lockstep over the same
/// batches, taking turns on who goes first, so machine noise lands on both.
/// Each step keeps its fastest time over `repeats` passes; the report holds
/// the mean over steps.
pub fn timing_comparison(base: &RunConfig, prepared: &Prepared, repeats: usize) -> Result<TimingReport> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be positive"));
    }
    let (sft_model, _) = run_sft(base, prepared, None)?;
    let reference = sft_model.snapshot();
    let variants = [Variant::Naive, Variant::DYNAMIC_PO];
    let epochs: Vec<Vec<PreferenceInstance>> = (0..base.po_epochs)
        .map(|e| {
            let inst = prepared.train_instances(base, e)?;
            Ok(shuffled(
                &inst,
                RngSeed(base.seed).derive(&[stream::SHUFFLE, 1, e as u64]),
            ))
        })
        .collect::<Result<_>>()?;
    let mut fastest: Vec<[f64; 2]> = Vec::new();
    for _ in 0..repeats {
        let mut models = [sft_model.clone(), sft_model.clone()];
        let mut opts = [
            OptimizerState::new(&sft_model, base.po_lr),
            OptimizerState::new(&sft_model, base.po_lr),
        ];
        for (step, batch) in epochs.iter().flat_map(|e| e.chunks(base.batch_size)).enumerate() {
            if fastest.len() <= step {
                fastest.push([f64::INFINITY; 2]);
            }
            for turn in 0..2 {
                let v = (step + turn) % 2;
                let t0 = Instant::now();
                po_step(
                    &mut models[v],
                    &reference,
                    batch,
                    base.objective,
                    variants[v],
                    &base.beta,
                    &mut opts[v],
                )?;
                let dt = t0.elapsed().as_secs_f64();
                fastest[step][v] = fastest[step][v].min(dt);
            }
        }
    }
    let steps = fastest.len();
    let mean = |v: usize| fastest.iter().map(|f| f[v]).sum::<f64>() / steps as f64;
    Ok(TimingReport {
        naive_step_seconds: mean(0),
        dynamic_step_seconds: mean(1),
        steps,
        repeats,
    })
}

/// `timing`: write `timing_report.csv` to `cfg.output_dir`.
pub fn cmd_timing(cfg: &RunConfig, repeats: usize) -> Result<TimingReport> {
    cfg.validate()?;
    let prepared = Prepared::load(cfg)?;
    let report = timing_comparison(cfg, &prepared, repeats)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_file(&cfg.output_dir.join("timing_report.csv"), report.to_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub hit_ratio_at_1: f64,
    pub reward_win_rate: f64,
    pub test_entries: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "hit_ratio_at_1,reward_win_rate,test_entries\n{},{},{}\n",
            self.hit_ratio_at_1, self.reward_win_rate, self.test_entries
        )
    }
}

/// `eval`: score a checkpoint against a reference on the config's test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, reference: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let prepared = Prepared::load(cfg)?;
    let model = PolicyModel::load(checkpoint)?;
    let reference = PolicyModel::load(reference)?.snapshot();
    if model.vocab_size() != prepared.vocab_size() || reference.model().vocab_size() != prepared.vocab_size() {
        return Err(Error::invalid("checkpoint vocabulary does not match the dataset"));
    }
    let report = EvalReport {
        hit_ratio_at_1: hit_ratio_at_1(&model, &prepared.test_eval)?,
        reward_win_rate: reward_win_rate(&model, &reference, &prepared.test_instances, cfg.beta.beta0)?,
        test_entries: prepared.test_eval.len(),
    };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_file(&cfg.output_dir.join("eval.csv"), report.to_csv())?;
    Ok(report)
}
