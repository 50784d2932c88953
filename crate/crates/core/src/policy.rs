//! Toy sequential recommender used as the policy.
//!
//! A context is encoded as the mean of its history's input embeddings; item
//! `j` scores `u . out[j]`, and the policy is the softmax over the whole
//! vocabulary. Gradients are analytic.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::beta::{boundary_betas, BetaConfig};
use crate::error::{Error, Result};
use crate::losses::{objective_loss, BetaVector, Objective};
use crate::numerics::log_sum_exp;
use crate::selection::{boundary_only, top_k_negatives, Stage, StageSwitches};
use crate::types::{log_ratios, stream, Context, ItemId, LikelihoodRecord, PreferenceInstance, RngSeed};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    vocab_size: usize,
    dim: usize,
    /// Row-major `[vocab_size x dim]`.
    item_embeddings: Vec<f64>,
    /// Row-major `[vocab_size x dim]`.
    output_embeddings: Vec<f64>,
    seed: u64,
}

/// Parameter-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub item: Vec<f64>,
    pub output: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &PolicyModel) -> Self {
        Self {
            item: vec![0.0; model.item_embeddings.len()],
            output: vec![0.0; model.output_embeddings.len()],
        }
    }
}

impl PolicyModel {
    /// Both embedding tables drawn from `N(0, 0.1^2)`.
    pub fn new(vocab_size: usize, dim: usize, seed: RngSeed) -> Result<Self> {
        Self::check_dims(vocab_size, dim)?;
        let mut rng = seed.derive(&[stream::INIT]).rng();
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let n = vocab_size * dim;
        let item_embeddings = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let output_embeddings = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            vocab_size,
            dim,
            item_embeddings,
            output_embeddings,
            seed: seed.0,
        })
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Result<Self> {
        Self::from_parts(
            vocab_size,
            dim,
            vec![0.0; vocab_size * dim],
            vec![0.0; vocab_size * dim],
            0,
        )
    }

    pub fn from_parts(
        vocab_size: usize,
        dim: usize,
        item_embeddings: Vec<f64>,
        output_embeddings: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        Self::check_dims(vocab_size, dim)?;
        let n = vocab_size * dim;
        if item_embeddings.len() != n || output_embeddings.len() != n {
            return Err(Error::invalid("embedding tables do not match vocab_size x dim"));
        }
        if item_embeddings.iter().chain(&output_embeddings).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding parameter".into()));
        }
        Ok(Self {
            vocab_size,
            dim,
            item_embeddings,
            output_embeddings,
            seed,
        })
    }

    fn check_dims(vocab_size: usize, dim: usize) -> Result<()> {
        if vocab_size < 2 {
            return Err(Error::invalid(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        if dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn item_embeddings(&self) -> &[f64] {
        &self.item_embeddings
    }

    pub fn output_embeddings(&self) -> &[f64] {
        &self.output_embeddings
    }

    pub fn item_embeddings_mut(&mut self) -> &mut [f64] {
        &mut self.item_embeddings
    }

    pub fn output_embeddings_mut(&mut self) -> &mut [f64] {
        &mut self.output_embeddings
    }

    fn item_row(&self, i: usize) -> &[f64] {
        &self.item_embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Mean of the history's input embeddings.
    pub fn encode(&self, ctx: &Context) -> Result<Vec<f64>> {
        ctx.validate(self.vocab_size)?;
        let mut u = vec![0.0; self.dim];
        for item in &ctx.history {
            for (a, b) in u.iter_mut().zip(self.item_row(item.index())) {
                *a += b;
            }
        }
        let inv = 1.0 / ctx.history.len() as f64;
        u.iter_mut().for_each(|v| *v *= inv);
        Ok(u)
    }

    fn scores(&self, u: &[f64]) -> Vec<f64> {
        self.output_embeddings
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Log-softmax over the whole vocabulary.
    pub fn log_probs(&self, ctx: &Context) -> Result<Vec<f64>> {
        let u = self.encode(ctx)?;
        let mut s = self.scores(&u);
        let lz = log_sum_exp(&s);
        s.iter_mut().for_each(|v| *v -= lz);
        Ok(s)
    }

    pub fn log_prob(&self, ctx: &Context, item: ItemId) -> Result<f64> {
        self.check_item(item)?;
        Ok(self.log_probs(ctx)?[item.index()])
    }

    fn check_item(&self, item: ItemId) -> Result<()> {
        if item.index() >= self.vocab_size {
            return Err(Error::invalid(format!(
                "item {} outside vocabulary of size {}",
                item.0, self.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass keeping what the backward pass needs.
    fn forward(&self, ctx: &Context) -> Result<Forward> {
        let u = self.encode(ctx)?;
        let mut log_p = self.scores(&u);
        let lz = log_sum_exp(&log_p);
        log_p.iter_mut().for_each(|v| *v -= lz);
        Ok(Forward { u, log_p })
    }

    /// Accumulate `scale * sum_c g_c * d log p(c | ctx) / d params` into `grads`,
    /// where `g` is given sparsely as `(item, weight)` pairs.
    fn backward(&self, ctx: &Context, fwd: &Forward, weights: &[(usize, f64)], scale: f64, grads: &mut Gradients) {
        let dim = self.dim;
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        // d/d score_j = g_j - p_j * sum(g)
        let mut score_grad: Vec<f64> = fwd.log_p.iter().map(|lp| -lp.exp() * total).collect();
        for &(j, w) in weights {
            score_grad[j] += w;
        }
        let mut u_grad = vec![0.0; dim];
        for (j, sg) in score_grad.iter().enumerate() {
            let sg = sg * scale;
            let out_row = &self.output_embeddings[j * dim..(j + 1) * dim];
            let g_row = &mut grads.output[j * dim..(j + 1) * dim];
            for d in 0..dim {
                g_row[d] += sg * fwd.u[d];
                u_grad[d] += sg * out_row[d];
            }
        }
        let inv = 1.0 / ctx.history.len() as f64;
        for item in &ctx.history {
            let row = &mut grads.item[item.index() * dim..(item.index() + 1) * dim];
            for d in 0..dim {
                row[d] += u_grad[d] * inv;
            }
        }
    }

    /// Mean next-item negative log-likelihood over `batch` and its parameter gradient.
    pub fn sft_loss_and_grad(&self, batch: &[(Context, ItemId)]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty SFT batch"));
        }
        let fwds = batch
            .par_iter()
            .map(|(ctx, item)| {
                self.check_item(*item)?;
                self.forward(ctx)
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Gradients::zeros(self);
        let mut loss = 0.0;
        for ((ctx, item), fwd) in batch.iter().zip(&fwds) {
            loss -= fwd.log_p[item.index()];
            self.backward(ctx, fwd, &[(item.index(), -1.0)], scale, &mut grads);
        }
        Ok((loss * scale, grads))
    }

    pub fn snapshot(&self) -> ReferenceModel {
        ReferenceModel(self.clone())
    }

    /// Binary checkpoint: magic `DYNPOCK1`, then little-endian `u64` vocab
    /// size, `u64` dim, `u64` seed, then the input table and the output table
    /// as little-endian `f64` in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 16 * self.item_embeddings.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.item_embeddings.iter().chain(&self.output_embeddings) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut &[u8]| -> Result<[u8; 8]> {
            r.read_exact(&mut word)
                .map_err(|_| Error::Checkpoint("truncated body".into()))?;
            Ok(word)
        };
        let vocab = u64::from_le_bytes(next(&mut r)?) as usize;
        let dim = u64::from_le_bytes(next(&mut r)?) as usize;
        let seed = u64::from_le_bytes(next(&mut r)?);
        let n = vocab
            .checked_mul(dim)
            .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
        if r.len() != 16 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                16 * n,
                r.len()
            )));
        }
        let mut params = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            params.push(f64::from_le_bytes(next(&mut r)?));
        }
        let output = params.split_off(n);
        Self::from_parts(vocab, dim, params, output, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DYNPOCK1";

struct Forward {
    u: Vec<f64>,
    log_p: Vec<f64>,
}

/// Frozen copy of a policy. Only shared access is exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel(PolicyModel);

impl ReferenceModel {
    pub fn model(&self) -> &PolicyModel {
        &self.0
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Gradients,
    v: Gradients,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(model: &PolicyModel, lr: f64) -> Self {
        Self {
            m: Gradients::zeros(model),
            v: Gradients::zeros(model),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn apply(&mut self, model: &mut PolicyModel, grads: &Gradients) -> Result<()> {
        if grads.item.len() != model.item_embeddings.len() || grads.output.len() != model.output_embeddings.len() {
            return Err(Error::invalid("gradient shape does not match model"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        update(
            &mut model.item_embeddings,
            &grads.item,
            &mut self.m.item,
            &mut self.v.item,
        );
        update(
            &mut model.output_embeddings,
            &grads.output,
            &mut self.m.output,
            &mut self.v.output,
        );
        Ok(())
    }
}

/// One Adam step on the mean next-item negative log-likelihood. Returns the
/// loss evaluated before the update.
pub fn sft_step(model: &mut PolicyModel, batch: &[(Context, ItemId)], opt: &mut OptimizerState) -> Result<f64> {
    let (loss, grads) = model.sft_loss_and_grad(batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("SFT loss {loss}")));
    }
    opt.apply(model, &grads)?;
    Ok(loss)
}

/// How negatives are chosen and weighted within an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// All negatives, uniform `beta0`.
    Naive,
    /// The `K` most likely negatives, uniform `beta0`.
    TopK(usize),
    /// Boundary selection with the given stages, optionally with dynamic beta.
    Dynamic { stages: StageSwitches, dynamic_beta: bool },
}

impl Variant {
    pub const DYNAMIC_PO: Variant = Variant::Dynamic {
        stages: StageSwitches {
            violation: true,
            cluster: true,
        },
        dynamic_beta: true,
    };
    pub const ABLATE_STAGE1: Variant = Variant::Dynamic {
        stages: StageSwitches {
            violation: false,
            cluster: true,
        },
        dynamic_beta: true,
    };
    pub const ABLATE_STAGE2: Variant = Variant::Dynamic {
        stages: StageSwitches {
            violation: true,
            cluster: false,
        },
        dynamic_beta: true,
    };
    pub const ABLATE_BOTH_STAGES: Variant = Variant::Dynamic {
        stages: StageSwitches {
            violation: false,
            cluster: false,
        },
        dynamic_beta: true,
    };
    pub const ABLATE_BETA: Variant = Variant::Dynamic {
        stages: StageSwitches {
            violation: true,
            cluster: true,
        },
        dynamic_beta: false,
    };

    /// Stable name used in configs and CSV output.
    pub fn name(&self) -> String {
        match *self {
            Variant::Naive => "naive".into(),
            Variant::TopK(k) => format!("topk{k}"),
            Variant::Dynamic { stages, dynamic_beta } => match (stages.violation, stages.cluster, dynamic_beta) {
                (true, true, true) => "dynamicpo".into(),
                (false, true, true) => "ablate-stage1".into(),
                (true, false, true) => "ablate-stage2".into(),
                (false, false, true) => "ablate-stages".into(),
                (true, true, false) => "ablate-beta".into(),
                (v, c, b) => format!("dynamic-v{}-c{}-b{}", v as u8, c as u8, b as u8),
            },
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "naive" => Variant::Naive,
            "dynamicpo" | "dynamic" => Variant::DYNAMIC_PO,
            "ablate-stage1" => Variant::ABLATE_STAGE1,
            "ablate-stage2" => Variant::ABLATE_STAGE2,
            "ablate-stages" => Variant::ABLATE_BOTH_STAGES,
            "ablate-beta" => Variant::ABLATE_BETA,
            _ => {
                if let Some(k) = s.strip_prefix("topk") {
                    let k: usize = k
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad top-K variant `{s}`")))?;
                    return Ok(Variant::TopK(k));
                }
                if let Some(rest) = s.strip_prefix("dynamic-v") {
                    let bits: Vec<&str> = rest.split(['-', 'c', 'b']).filter(|p| !p.is_empty()).collect();
                    if bits.len() == 3 && bits.iter().all(|b| *b == "0" || *b == "1") {
                        return Ok(Variant::Dynamic {
                            stages: StageSwitches {
                                violation: bits[0] == "1",
                                cluster: bits[1] == "1",
                            },
                            dynamic_beta: bits[2] == "1",
                        });
                    }
                }
                return Err(Error::invalid(format!("unknown variant `{s}`")));
            }
        })
    }
}

/// Negatives entering the loss for one instance, with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSelection {
    pub active: Vec<usize>,
    pub betas: BetaVector,
    /// Present for the boundary-selection variants.
    pub stage: Option<Stage>,
}

/// Apply `variant` to a likelihood record.
pub fn select_active(rec: &LikelihoodRecord, variant: Variant, cfg: &BetaConfig) -> Result<InstanceSelection> {
    let k = rec.k();
    match variant {
        Variant::Naive => Ok(InstanceSelection {
            active: (0..k).collect(),
            betas: BetaVector::uniform(cfg.beta0, k)?,
            stage: None,
        }),
        Variant::TopK(top) => {
            let active = top_k_negatives(rec, top)?;
            Ok(InstanceSelection {
                betas: BetaVector::uniform(cfg.beta0, active.len())?,
                active,
                stage: None,
            })
        }
        Variant::Dynamic {
            stages,
            dynamic_beta: dyn_beta,
        } => {
            let (active, stage) = boundary_only(rec, stages)?;
            let betas = if dyn_beta {
                BetaVector::new(boundary_betas(rec, &active, cfg)?)?
            } else {
                BetaVector::uniform(cfg.beta0, active.len())?
            };
            Ok(InstanceSelection {
                active,
                betas,
                stage: Some(stage),
            })
        }
    }
}

/// Policy and reference log-likelihoods of an instance's candidates.
pub fn likelihood_record(
    model: &PolicyModel,
    reference: &ReferenceModel,
    inst: &PreferenceInstance,
) -> Result<LikelihoodRecord> {
    inst.validate(model.vocab_size)?;
    let theta = model.log_probs(&inst.context)?;
    let refp = reference.model().log_probs(&inst.context)?;
    build_record(inst, &theta, &refp)
}

fn build_record(inst: &PreferenceInstance, theta: &[f64], refp: &[f64]) -> Result<LikelihoodRecord> {
    LikelihoodRecord::new(
        theta[inst.positive.index()],
        refp[inst.positive.index()],
        inst.negatives.iter().map(|n| theta[n.index()]).collect(),
        inst.negatives.iter().map(|n| refp[n.index()]).collect(),
    )
}

/// Per-instance outcome of a preference-optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStep {
    pub loss: f64,
    pub record: LikelihoodRecord,
    pub selection: InstanceSelection,
}

impl InstanceStep {
    pub fn stage(&self) -> Option<Stage> {
        self.selection.stage
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoStepOutput {
    pub mean_loss: f64,
    pub instances: Vec<InstanceStep>,
}

// forward pass, per-instance result and sparse output weights for the backward pass
type InstanceWork = (Forward, InstanceStep, Vec<(usize, f64)>);

/// Mean preference loss over `batch` and its parameter gradient, without updating.
pub fn po_loss_and_grad(
    model: &PolicyModel,
    reference: &ReferenceModel,
    batch: &[PreferenceInstance],
    objective: Objective,
    variant: Variant,
    cfg: &BetaConfig,
) -> Result<(PoStepOutput, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty preference batch"));
    }
    cfg.validate()?;
    if let Variant::TopK(top) = variant {
        if let Some(inst) = batch.iter().find(|i| top == 0 || top > i.k()) {
            return Err(Error::invalid(format!(
                "top-K with K={top} but instance has k={}",
                inst.k()
            )));
        }
    }
    if objective == Objective::Dpo {
        if let Some(inst) = batch.iter().find(|i| i.k() != 1) {
            return Err(Error::invalid(format!("dpo objective needs k=1, got k={}", inst.k())));
        }
    }

    let per_instance = batch
        .par_iter()
        .map(|inst| -> Result<InstanceWork> {
            inst.validate(model.vocab_size)?;
            let fwd = model.forward(&inst.context)?;
            let refp = reference.model().log_probs(&inst.context)?;
            let record = build_record(inst, &fwd.log_p, &refp)?;
            let selection = select_active(&record, variant, cfg)?;
            let out = objective_loss(objective, &log_ratios(&record), &selection.betas, &selection.active)?;
            let mut weights = Vec::with_capacity(1 + selection.active.len());
            weights.push((inst.positive.index(), out.grad_pos));
            for &i in &selection.active {
                weights.push((inst.negatives[i].index(), out.grad_neg[i]));
            }
            Ok((
                fwd,
                InstanceStep {
                    loss: out.value,
                    record,
                    selection,
                },
                weights,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros(model);
    let mut total = 0.0;
    let mut instances = Vec::with_capacity(batch.len());
    for (inst, (fwd, step, weights)) in batch.iter().zip(per_instance) {
        model.backward(&inst.context, &fwd, &weights, scale, &mut grads);
        total += step.loss;
        instances.push(step);
    }
    Ok((
        PoStepOutput {
            mean_loss: total * scale,
            instances,
        },
        grads,
    ))
}

/// One preference-optimization step: per-instance likelihoods, selection,
/// loss, backpropagation into the embeddings, and one Adam update on the
/// batch mean. The reference model is only read.
pub fn po_step(
    model: &mut PolicyModel,
    reference: &ReferenceModel,
    batch: &[PreferenceInstance],
    objective: Objective,
    variant: Variant,
    cfg: &BetaConfig,
    opt: &mut OptimizerState,
) -> Result<PoStepOutput> {
    let (out, grads) = po_loss_and_grad(model, reference, batch, objective, variant, cfg)?;
    if !out.mean_loss.is_finite() {
        return Err(Error::NonFinite(format!("preference loss {}", out.mean_loss)));
    }
    opt.apply(model, &grads)?;
    Ok(out)
}
