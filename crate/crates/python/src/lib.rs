//! Python bindings: loss kernels, selection, dynamic beta and whole runs.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use dynpo::harness::{self, Prepared, SUMMARY_COLUMNS};
use dynpo::{BetaConfig, BetaVector, DualMargins, Error, LikelihoodRecord, LogRatioSet, Objective, RunConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Loss value, gradient w.r.t. the positive log-ratio and per-negative gradients.
///
/// `objective` is one of dpo, dmpo, sdpo, mppo. `betas` holds one weight per
/// active negative; `active` defaults to every negative.
#[pyfunction]
#[pyo3(signature = (objective, r_pos, r_neg, betas, active=None))]
pub fn loss(
    objective: &str,
    r_pos: f64,
    r_neg: Vec<f64>,
    betas: Vec<f64>,
    active: Option<Vec<usize>>,
) -> PyResult<(f64, f64, Vec<f64>)> {
    let objective: Objective = objective.parse().map_err(py_err)?;
    let active = active.unwrap_or_else(|| (0..r_neg.len()).collect());
    let ratios = LogRatioSet { r_pos, r_neg };
    let betas = BetaVector::new(betas).map_err(py_err)?;
    let out = dynpo::objective_loss(objective, &ratios, &betas, &active).map_err(py_err)?;
    Ok((out.value, out.grad_pos, out.grad_neg))
}

/// `(assignments, centroids, wcss)` with clusters numbered by ascending centroid.
#[pyfunction]
pub fn kmeans_1d_exact(values: Vec<f64>, k: usize) -> PyResult<(Vec<usize>, Vec<f64>, f64)> {
    let km = dynpo::kmeans_1d_exact(&values, k).map_err(py_err)?;
    Ok((km.assignments, km.centroids, km.wcss))
}

/// Boundary negatives of a record and the stage that chose them.
#[pyfunction]
pub fn select_boundary(pos_theta: f64, neg_theta: Vec<f64>) -> PyResult<(Vec<usize>, &'static str)> {
    // reference values do not enter selection
    let rec = LikelihoodRecord::new(pos_theta, pos_theta, neg_theta.clone(), neg_theta).map_err(py_err)?;
    let sel = dynpo::select_boundary(&rec).map_err(py_err)?;
    Ok((sel.boundary, sel.stage.name()))
}

#[pyfunction]
#[pyo3(signature = (delta_p, delta_n, beta0=1.0, alpha=0.5, gamma=6.0))]
pub fn dynamic_beta(delta_p: f64, delta_n: f64, beta0: f64, alpha: f64, gamma: f64) -> PyResult<f64> {
    let cfg = BetaConfig::new(beta0, alpha, gamma).map_err(py_err)?;
    dynpo::dynamic_beta(&DualMargins::from_deltas(delta_p, delta_n), &cfg).map_err(py_err)
}

fn resolve(config: Option<&str>, overrides: BTreeMap<String, String>) -> PyResult<RunConfig> {
    let mut cfg = match config {
        Some(text) => RunConfig::parse(text).map_err(py_err)?,
        None => RunConfig::default(),
    };
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Train in memory and return the summary row keyed by column name.
///
/// `config` is the text of a `key = value` config; `overrides` sets single
/// keys on top of it. With `write=True` the run directory is written to the
/// config's `output_dir` as the CLI would.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=BTreeMap::new(), write=false))]
pub fn train(
    py: Python<'_>,
    config: Option<&str>,
    overrides: BTreeMap<String, String>,
    write: bool,
) -> PyResult<BTreeMap<String, String>> {
    let cfg = resolve(config, overrides)?;
    let out = py
        .detach(|| {
            let prepared = Prepared::load(&cfg)?;
            let out = harness::train(&cfg, &prepared, None)?;
            if write {
                harness::write_run(&out, &cfg.output_dir)?;
            }
            Ok::<_, Error>(out)
        })
        .map_err(py_err)?;
    Ok(SUMMARY_COLUMNS
        .iter()
        .map(|c| c.to_string())
        .zip(out.summary.values())
        .collect())
}

/// `(naive_step_seconds, dynamic_step_seconds)` from the lockstep comparison.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=BTreeMap::new(), repeats=3))]
pub fn timing(
    py: Python<'_>,
    config: Option<&str>,
    overrides: BTreeMap<String, String>,
    repeats: usize,
) -> PyResult<(f64, f64)> {
    let cfg = resolve(config, overrides)?;
    let report = py
        .detach(|| harness::timing_comparison(&cfg, &Prepared::load(&cfg)?, repeats))
        .map_err(py_err)?;
    Ok((report.naive_step_seconds, report.dynamic_step_seconds))
}

#[pymodule]
pub fn dynpo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_1d_exact, m)?)?;
    m.add_function(wrap_pyfunction!(select_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_beta, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(timing, m)?)?;
    m.add("SUMMARY_COLUMNS", SUMMARY_COLUMNS.to_vec())?;
    Ok(())
}
