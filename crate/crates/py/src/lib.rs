//! Python bindings: chain construction, population loss and gradient,
//! the second critical point, presets and the verification suites.

use std::path::PathBuf;

use attn_stages::cli::{self, Common, Outcome};
use attn_stages::critical::{attention_rate, find_kappa1};
use attn_stages::markov::{sample_dataset, StationaryDistribution};
use attn_stages::model::{init_params, ModelParams};
use attn_stages::population::{param_gradient_population, population_loss};
use attn_stages::{build_stationary, build_transition, Error, MarkovSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument { .. } | Error::Dimension(_) | Error::InvalidToken { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn chain(pi: &[f64], lam: f64) -> PyResult<MarkovSpec> {
    let dist = StationaryDistribution::from_probs(pi).map_err(to_py)?;
    build_transition(dist, lam).map_err(to_py)
}

fn params(d: usize, m: usize, flat: &[f64]) -> PyResult<ModelParams> {
    ModelParams::from_flat(d, m, flat).map_err(to_py)
}

/// π₁ = pi1 and π_i = (1−pi1)/(d−1) + c_{i−1}·delta for the other tokens.
#[pyfunction]
#[pyo3(signature = (d, pi1, c=None, delta=0.0))]
fn stationary(d: usize, pi1: f64, c: Option<Vec<f64>>, delta: f64) -> PyResult<Vec<f64>> {
    let c = c.unwrap_or_else(|| vec![0.0; d.saturating_sub(1)]);
    Ok(build_stationary(d, pi1, &c, delta).map_err(to_py)?.pi)
}

/// P = λI + (1−λ)𝟙πᵀ as a list of rows.
#[pyfunction]
fn transition(pi: Vec<f64>, lam: f64) -> PyResult<Vec<Vec<f64>>> {
    let spec = chain(&pi, lam)?;
    let d = spec.d();
    Ok((0..d).map(|i| (0..d).map(|j| spec.p[(i, j)]).collect()).collect())
}

/// Returns (sequences, labels) with 0-based tokens.
#[pyfunction]
fn sample(pi: Vec<f64>, lam: f64, n: usize, s: usize, seed: u64) -> PyResult<(Vec<Vec<u32>>, Vec<u32>)> {
    let data = sample_dataset(&chain(&pi, lam)?, n, s, seed).map_err(to_py)?;
    let seqs = (0..data.n).map(|i| data.sequence(i).to_vec()).collect();
    Ok((seqs, data.labels))
}

/// Flat parameters in the order W0, W1, WQ, WK (row-major), N(0, eps²) entries.
#[pyfunction]
fn init(d: usize, m: usize, eps: f64, seed: u64) -> PyResult<Vec<f64>> {
    Ok(init_params(d, m, eps, seed).map_err(to_py)?.to_flat())
}

/// Population loss and its gradient with respect to the flat parameters.
#[pyfunction]
fn loss_and_grad(pi: Vec<f64>, lam: f64, m: usize, flat: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    let spec = chain(&pi, lam)?;
    let p = params(spec.d(), m, &flat)?;
    let loss = population_loss(&p, &spec).map_err(to_py)?;
    let g = param_gradient_population(&p, &spec).map_err(to_py)?;
    Ok((loss, g.to_flat()))
}

/// The second critical point for two-group data.
#[pyfunction]
fn second_critical_point<'py>(py: Python<'py>, d: usize, pi1: f64, lam: f64, m: usize) -> PyResult<Bound<'py, PyDict>> {
    let dist = StationaryDistribution::two_group(d, pi1).map_err(to_py)?;
    let spec = build_transition(dist, lam).map_err(to_py)?;
    let cp = find_kappa1(&spec, m, None).map_err(to_py)?;
    let kappa = cp.kappa1.unwrap_or(f64::NAN);
    let out = PyDict::new(py);
    out.set_item("kappa1", kappa)?;
    out.set_item("grad_norm", cp.grad_norm)?;
    out.set_item("attention_rate", attention_rate(&spec, kappa))?;
    out.set_item("params", cp.params.to_flat())?;
    Ok(out)
}

/// (name, experiment, description) for every built-in preset.
#[pyfunction]
fn presets() -> Vec<(String, String, String)> {
    cli::presets()
        .into_iter()
        .map(|p| (p.name.to_string(), p.experiment.name().to_string(), p.description.to_string()))
        .collect()
}

/// Run a preset into `out`; returns (run directory, status message or None).
#[pyfunction]
#[pyo3(signature = (name, out, seed=None, force=false))]
fn run_preset(name: &str, out: PathBuf, seed: Option<u64>, force: bool) -> PyResult<(PathBuf, Option<String>)> {
    let preset = cli::find_preset(name).map_err(to_py)?;
    let common = Common { preset: Some(name.to_string()), out: Some(out), seed, force, ..Default::default() };
    let (dir, outcome) = cli::run_experiment(preset.experiment, &common, None).map_err(to_py)?;
    Ok(match outcome {
        Outcome::Ok => (dir, None),
        Outcome::CertificationFailed(m) => (dir, Some(m)),
    })
}

/// (suite, check, passed, detail) rows of a verification suite.
#[pyfunction]
#[pyo3(signature = (suite="all"))]
fn verify(suite: &str) -> PyResult<Vec<(String, String, bool, String)>> {
    let rows = attn_stages::verify::run_suite(suite).map_err(to_py)?;
    Ok(rows.into_iter().map(|r| (r.suite.to_string(), r.name.to_string(), r.passed, r.detail)).collect())
}

#[pymodule]
fn attn_stages_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(stationary, m)?)?;
    m.add_function(wrap_pyfunction!(transition, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(init, m)?)?;
    m.add_function(wrap_pyfunction!(loss_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(second_critical_point, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
