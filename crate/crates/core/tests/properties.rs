use proptest::prelude::*;

use dynpo::data::{chronological_split, generate_synthetic, SyntheticConfig};
use dynpo::harness::Prepared;
use dynpo::losses::dmpo_margin;
use dynpo::policy::po_loss_and_grad;
use dynpo::{
    dmpo_loss, log_ratios, objective_loss, po_step, select_boundary, violation_set, BetaConfig, BetaVector,
    LikelihoodRecord, Objective, OptimizerState, PolicyModel, RngSeed, RunConfig, Stage, Variant,
};

const MULTI: [Objective; 3] = [Objective::Dmpo, Objective::Sdpo, Objective::Mppo];

fn record() -> impl Strategy<Value = LikelihoodRecord> {
    (1usize..12)
        .prop_flat_map(|k| {
            (
                -15.0f64..-0.5,
                -15.0f64..-0.5,
                prop::collection::vec(-15.0f64..-0.5, k),
                prop::collection::vec(-15.0f64..-0.5, k),
            )
        })
        .prop_map(|(pt, pr, nt, nr)| LikelihoodRecord::new(pt, pr, nt, nr).unwrap())
}

fn shifted(rec: &LikelihoodRecord, c: f64) -> LikelihoodRecord {
    let add = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
    LikelihoodRecord::new(
        rec.pos_theta + c,
        rec.pos_ref + c,
        add(&rec.neg_theta),
        add(&rec.neg_ref),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn losses_ignore_a_common_shift(rec in record(), c in -5.0f64..5.0, beta in 0.2f64..2.0) {
        let k = rec.k();
        let all: Vec<usize> = (0..k).collect();
        let b = BetaVector::uniform(beta, k).unwrap();
        for obj in MULTI {
            let a = objective_loss(obj, &log_ratios(&rec), &b, &all).unwrap().value;
            let s = objective_loss(obj, &log_ratios(&shifted(&rec, c)), &b, &all).unwrap().value;
            prop_assert!((a - s).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn raising_the_positive_moves_the_dmpo_margin_by_mean_beta(
        rec in record(),
        c in -3.0f64..3.0,
        betas in prop::collection::vec(0.2f64..2.0, 12),
    ) {
        let k = rec.k();
        let all: Vec<usize> = (0..k).collect();
        let b = BetaVector::new(betas[..k].to_vec()).unwrap();
        let mut up = rec.clone();
        up.pos_theta += c;
        let before = dmpo_margin(&log_ratios(&rec), &b, &all).unwrap();
        let after = dmpo_margin(&log_ratios(&up), &b, &all).unwrap();
        prop_assert!((after - before - b.mean() * c).abs() < 1e-9);
    }

    #[test]
    fn gradient_signs(rec in record(), betas in prop::collection::vec(0.2f64..2.0, 12), mask in any::<u16>()) {
        let k = rec.k();
        let mut active: Vec<usize> = (0..k).filter(|i| mask >> i & 1 == 1).collect();
        if active.is_empty() {
            active.push(0);
        }
        let b = BetaVector::new(betas[..active.len()].to_vec()).unwrap();
        for obj in MULTI {
            let out = objective_loss(obj, &log_ratios(&rec), &b, &active).unwrap();
            prop_assert!(out.grad_pos <= 0.0);
            for (i, g) in out.grad_neg.iter().enumerate() {
                if active.contains(&i) {
                    prop_assert!(*g >= 0.0);
                } else {
                    prop_assert_eq!(*g, 0.0);
                }
            }
        }
    }

    #[test]
    fn violations_take_precedence(rec in record()) {
        let sel = select_boundary(&rec).unwrap();
        let vio = violation_set(&rec);
        if vio.is_empty() {
            prop_assert_ne!(sel.stage, Stage::Violation);
        } else {
            prop_assert_eq!(sel.stage, Stage::Violation);
            prop_assert_eq!(sel.boundary, vio);
        }
    }
}

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set("synthetic.users", "30").unwrap();
    cfg.set("synthetic.items", "40").unwrap();
    cfg.history_len = 5;
    cfg.k = 6;
    cfg.batch_size = 8;
    cfg
}

#[test]
fn reference_is_never_written() {
    let cfg = small_cfg();
    let prepared = Prepared::load(&cfg).unwrap();
    let mut model = PolicyModel::new(prepared.vocab_size(), cfg.dim, RngSeed(3)).unwrap();
    let reference = model.snapshot();
    let before = reference.model().to_bytes();
    let mut opt = OptimizerState::new(&model, 1e-2);
    let batch = prepared.train_instances(&cfg, 0).unwrap();
    for variant in [Variant::Naive, Variant::DYNAMIC_PO, Variant::TopK(2)] {
        for chunk in batch.chunks(cfg.batch_size).take(5) {
            po_step(
                &mut model,
                &reference,
                chunk,
                Objective::Dmpo,
                variant,
                &cfg.beta,
                &mut opt,
            )
            .unwrap();
        }
    }
    assert_eq!(reference.model().to_bytes(), before);
    assert_ne!(model.to_bytes(), before);
}

#[test]
fn naive_step_loss_is_the_direct_dmpo_loss() {
    let cfg = small_cfg();
    let prepared = Prepared::load(&cfg).unwrap();
    let model = PolicyModel::new(prepared.vocab_size(), cfg.dim, RngSeed(5)).unwrap();
    let reference = PolicyModel::new(prepared.vocab_size(), cfg.dim, RngSeed(6))
        .unwrap()
        .snapshot();
    let batch = prepared.train_instances(&cfg, 0).unwrap();
    let batch = &batch[..cfg.batch_size];
    let beta = BetaConfig::default();
    let (out, _) = po_loss_and_grad(&model, &reference, batch, Objective::Dmpo, Variant::Naive, &beta).unwrap();
    let mut direct = 0.0;
    for inst in batch {
        let lp = model.log_probs(&inst.context).unwrap();
        let rp = reference.model().log_probs(&inst.context).unwrap();
        let rec = LikelihoodRecord::new(
            lp[inst.positive.index()],
            rp[inst.positive.index()],
            inst.negatives.iter().map(|n| lp[n.index()]).collect(),
            inst.negatives.iter().map(|n| rp[n.index()]).collect(),
        )
        .unwrap();
        let all: Vec<usize> = (0..rec.k()).collect();
        direct += dmpo_loss(
            &log_ratios(&rec),
            &BetaVector::uniform(beta.beta0, rec.k()).unwrap(),
            &all,
        )
        .unwrap()
        .value;
    }
    direct /= batch.len() as f64;
    assert!((out.mean_loss - direct).abs() < 1e-12, "{} vs {direct}", out.mean_loss);
}

#[test]
fn split_positions_are_ordered_per_user() {
    let log = generate_synthetic(&SyntheticConfig::default(), RngSeed(9)).unwrap();
    let split = chronological_split(&log, (0.8, 0.1, 0.1), 10).unwrap();
    for user in 0..split.kept_users as u32 {
        let pos = |v: &[dynpo::data::SplitEntry]| -> Vec<usize> {
            v.iter()
                .filter(|e| e.context.user == user)
                .map(|e| e.position)
                .collect()
        };
        let (tr, va, te) = (pos(&split.train), pos(&split.valid), pos(&split.test));
        let max_tr = tr.iter().max().copied().unwrap_or(0);
        assert!(va.iter().chain(&te).all(|&p| p > max_tr));
        assert!(te.iter().all(|&t| va.iter().all(|&v| v < t)));
    }
}

#[test]
fn training_leaves_the_input_csv_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let log = dynpo::harness::load_log(&cfg).unwrap();
    let csv = tmp.path().join("in.csv");
    log.export_csv(&csv).unwrap();
    let before = std::fs::read(&csv).unwrap();
    let mut run = cfg.clone();
    run.set("data", csv.to_str().unwrap()).unwrap();
    run.sft_epochs = 1;
    run.po_epochs = 1;
    run.output_dir = tmp.path().join("run");
    dynpo::harness::cmd_train(&run).unwrap();
    assert_eq!(std::fs::read(&csv).unwrap(), before);
}
