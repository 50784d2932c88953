use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

use dynpo_py::{dynamic_beta, kmeans_1d_exact, loss, select_boundary};

fn run_py(code: &str) -> PyResult<()> {
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(dynpo_py::dynpo_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("dynpo", module)?;
        py.run(&CString::new(code).unwrap(), Some(&globals), None)
    })
}

#[test]
fn losses_at_zero_ratios() {
    let ln2 = std::f64::consts::LN_2;
    for obj in ["dmpo", "sdpo", "mppo"] {
        let (v, _, g) = loss(obj, 0.0, vec![0.0], vec![1.0], None).unwrap();
        assert!((v - ln2).abs() < 1e-12, "{obj}");
        assert_eq!(g.len(), 1);
    }
    let (v, gp, _) = loss("dpo", 0.0, vec![0.0], vec![1.0], None).unwrap();
    assert!((v - ln2).abs() < 1e-12);
    assert!((gp + 0.5).abs() < 1e-12);
}

#[test]
fn inactive_negative_gets_no_gradient() {
    let (_, _, g) = loss("dmpo", 0.3, vec![0.1, -0.4, 0.2], vec![1.0, 2.0], Some(vec![0, 2])).unwrap();
    assert_eq!(g[1], 0.0);
    assert!(g[0] > 0.0 && g[2] > 0.0);
}

#[test]
fn bad_inputs_are_value_errors() {
    assert!(loss("nope", 0.0, vec![0.0], vec![1.0], None).is_err());
    assert!(loss("dmpo", 0.0, vec![0.0], vec![-1.0], None).is_err());
    assert!(kmeans_1d_exact(vec![1.0], 2).is_err());
    assert!(dynamic_beta(1.0, 1.0, 1.0, 1.0, 6.0).is_err());
}

#[test]
fn selection_and_kmeans() {
    let (b, stage) = select_boundary(-1.0, vec![-0.5, -3.0, -0.9]).unwrap();
    assert_eq!((b, stage), (vec![0, 2], "violation"));
    let (b, stage) = select_boundary(-1.0, vec![-2.0, -2.1, -5.0, -9.0]).unwrap();
    assert_eq!((b, stage), (vec![0, 1], "cluster"));
    let (a, c, w) = kmeans_1d_exact(vec![0.0, 10.0, 0.5, 20.0], 3).unwrap();
    assert_eq!(a, vec![0, 1, 0, 2]);
    assert_eq!(c, vec![0.25, 10.0, 20.0]);
    assert!((w - 0.125).abs() < 1e-12);
}

#[test]
fn beta_defaults_match_core() {
    assert_eq!(dynamic_beta(8.0, 2.0, 1.0, 0.5, 6.0).unwrap(), 1.0);
    let b = dynamic_beta(1.0, 5.0, 1.0, 0.5, 6.0).unwrap();
    assert!((b - (1.0 - 0.5 * (5.0f64 / 3.0).tanh())).abs() < 1e-15);
}

#[test]
fn module_from_python() {
    run_py(
        r#"
import math
v, gp, gn = dynpo.loss("mppo", 0.0, [0.0, 0.0], [1.0, 1.0])
assert abs(v - math.log(2)) < 1e-12
assert dynpo.dynamic_beta(8.0, 2.0) == 1.0
assert dynpo.select_boundary(-1.0, [-0.5, -3.0])[1] == "violation"
try:
    dynpo.kmeans_1d_exact([float("nan"), 1.0, 2.0], 3)
    raise AssertionError("expected an error")
except ArithmeticError:
    pass
try:
    dynpo.train(overrides={"k": "0"})
    raise AssertionError("expected an error")
except ValueError:
    pass
assert "hit_ratio_at_1" in dynpo.SUMMARY_COLUMNS
"#,
    )
    .unwrap();
}

#[test]
fn small_train_from_python() {
    run_py(
        r#"
cfg = {"synthetic.users": "40", "synthetic.items": "30", "sft_epochs": "1", "po_epochs": "1",
       "k": "4", "variant": "dynamicpo", "history_len": "5"}
a = dynpo.train(overrides=cfg)
b = dynpo.train(overrides=cfg)
assert a == b
assert a["variant"] == "dynamicpo" and a["k"] == "4"
assert 0.0 <= float(a["hit_ratio_at_1"]) <= 1.0
"#,
    )
    .unwrap();
}
