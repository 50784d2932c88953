use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dynpo::data::parse_csv;
use dynpo::{PolicyModel, RunConfig};

const SMALL: &[&str] = &[
    "--set",
    "synthetic.users=40",
    "--set",
    "synthetic.items=30",
    "--set",
    "history_len=5",
    "--sft-epochs",
    "1",
    "--po-epochs",
    "1",
    "--k",
    "4",
];

fn dynpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynpo")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dynpo(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small(cmd: &str, dir: &Path, extra: &[&str]) -> String {
    let mut args = vec![cmd, "-o", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args)
}

fn data_rows(csv: &str) -> usize {
    csv.lines().count() - 1
}

#[test]
fn generate_is_deterministic_and_reingests() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small("generate", &a, &[]);
    small("generate", &b, &[]);
    for f in ["interactions.csv", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(a.join("interactions.csv")).unwrap();
    let log = parse_csv(&text).unwrap();
    assert_eq!(log.user_count(), 40);
    assert_eq!(log.to_csv_string(), text);
    assert!(fs::read_to_string(a.join("manifest.txt"))
        .unwrap()
        .contains("seed = 42"));

    let other = tmp.path().join("c");
    small("generate", &other, &["--seed", "7"]);
    assert_ne!(
        fs::read(a.join("interactions.csv")).unwrap(),
        fs::read(other.join("interactions.csv")).unwrap()
    );
}

#[test]
fn training_on_exported_csv_matches_synthetic_run() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    small("generate", &gen, &[]);
    let csv = gen.join("interactions.csv");
    let synthetic = small("train", &tmp.path().join("syn"), &[]);
    let ingested = small("train", &tmp.path().join("csv"), &["--data", csv.to_str().unwrap()]);
    assert_eq!(synthetic, ingested);
}

#[test]
fn invalid_settings_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    for bad in [
        vec!["train", "-o", dir, "--k", "0"],
        vec!["train", "-o", dir, "--set", "synthetic.users=0"],
        vec!["train", "-o", dir, "--alpha", "1.5"],
        vec!["train", "-o", dir, "--variant", "sideways"],
        vec!["train", "-o", dir, "--set", "no_such_key=1"],
        vec!["sweep", "-o", dir, "--grid", "nope"],
        vec!["timing", "-o", dir, "--repeats", "0"],
        vec!["train", "-o", dir, "--data", "/definitely/missing.csv"],
    ] {
        let out = dynpo(&bad);
        assert!(!out.status.success(), "{bad:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error kind="), "{bad:?}: {err}");
    }
}

#[test]
fn sweep_grids_have_expected_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    for (grid, rows) in [("k", 14), ("ablation", 5), ("topk", 4)] {
        let dir = tmp.path().join(grid);
        // k up to 15 needs more unseen items than the small catalog leaves
        let csv = small("sweep", &dir, &["--grid", grid, "--set", "synthetic.items=60"]);
        assert_eq!(data_rows(&csv), rows, "{grid}");
        assert_eq!(fs::read_to_string(dir.join("sweep.csv")).unwrap(), csv);
        assert!(csv.lines().skip(1).all(|l| l.split(',').nth(3) == Some("ok")), "{csv}");
    }
}

#[test]
fn failing_sweep_entry_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = small("sweep", tmp.path(), &["--grid", "topk", "--values", "2,9"]);
    let status: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(status, ["ok", "error:invalid-parameter", "ok"]);
}

#[test]
fn written_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let summary = small("train", &first, &["--variant", "dynamicpo"]);
    let text = fs::read_to_string(first.join("config.txt")).unwrap();
    let cfg = RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.to_text(), text);
    assert_eq!(cfg.k, 4);

    let second = tmp.path().join("second");
    let cfg_path = first.join("config.txt");
    let again = ok(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "-o",
        second.to_str().unwrap(),
    ]);
    assert_eq!(summary, again);
}

#[test]
fn checkpoints_round_trip_through_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let summary = small("train", &run, &["--variant", "dynamicpo"]);
    let model = PolicyModel::load(&run.join("final.ckpt")).unwrap();
    assert_eq!(model.to_bytes(), fs::read(run.join("final.ckpt")).unwrap());

    let (ckpt, reference) = (run.join("final.ckpt"), run.join("reference.ckpt"));
    let eval = small(
        "eval",
        &tmp.path().join("eval"),
        &[
            "--variant",
            "dynamicpo",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--reference",
            reference.to_str().unwrap(),
        ],
    );
    let header: Vec<&str> = summary.lines().next().unwrap().split(',').collect();
    let values: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    let col = |name: &str| values[header.iter().position(|h| *h == name).unwrap()];
    let row: Vec<&str> = eval.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], col("hit_ratio_at_1"));
    assert_eq!(row[1], col("reward_win_rate"));

    fs::write(tmp.path().join("broken.ckpt"), b"DYNPOCK1 short").unwrap();
    let broken = tmp.path().join("broken.ckpt");
    let mut args = vec![
        "eval",
        "--checkpoint",
        broken.to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let out = dynpo(&args);
    assert!(!out.status.success());
}

#[test]
fn run_directory_contents() {
    let tmp = tempfile::tempdir().unwrap();
    small("train", tmp.path(), &[]);
    for f in [
        "config.txt",
        "reference.ckpt",
        "final.ckpt",
        "epoch_metrics.csv",
        "sb_curve.csv",
        "summary.csv",
        "timing.csv",
    ] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let epochs = fs::read_to_string(tmp.path().join("epoch_metrics.csv")).unwrap();
    assert_eq!(epochs.lines().filter(|l| l.starts_with("sft,")).count(), 1);
    assert_eq!(epochs.lines().filter(|l| l.starts_with("po,")).count(), 1);
}

#[test]
fn timing_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = small("timing", tmp.path(), &["--repeats", "1"]);
    assert!(out.starts_with("naive_step_seconds,dynamic_step_seconds,overhead_ratio"));
    assert_eq!(fs::read_to_string(tmp.path().join("timing_report.csv")).unwrap(), out);
}
