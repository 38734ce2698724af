use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dpsmc::dpnoise::{analytic_gaussian_epsilon as gaussian_epsilon, plan_noise as plan, NoiseMode};
use dpsmc::fixedpoint::FixedPointCodec;
use dpsmc::harness::{execute, ExperimentConfig};
use dpsmc::keystream::Seed;
use dpsmc::projection::solve_sensitivity as solve;
use dpsmc::sampling::{amplification_curve as curve, effective_fraction_swor as swor, AmplificationQuery};
use dpsmc::securesum::{InProcessSummation, ProtocolConfig, SecureSummation};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Sensitivity bound `C̃` of a `k`-dimensional projection of a vector clipped to `clip_norm`.
#[pyfunction]
#[pyo3(signature = (k, clip_norm = 1.0, delta_prime = 1e-6))]
fn solve_sensitivity(k: usize, clip_norm: f64, delta_prime: f64) -> PyResult<f64> {
    if k == 0 || !(clip_norm >= 0.0) || !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(PyValueError::new_err("need k >= 1, clip_norm >= 0 and 0 < delta_prime < 1"));
    }
    Ok(solve(k, clip_norm, delta_prime))
}

#[pyfunction]
#[pyo3(signature = (n, n_honest, b, delta_slack = 0.0))]
fn effective_fraction_swor(n: usize, n_honest: usize, b: usize, delta_slack: f64) -> PyResult<f64> {
    swor(&AmplificationQuery {
        n,
        n_honest,
        b,
        delta_slack,
    })
    .map_err(value_err)
}

/// Rows of `(adv_frac, slack, swor_frac, poisson_frac)`.
#[pyfunction]
fn amplification_curve(n: usize, b: usize, slacks: Vec<f64>, adv_fracs: Vec<f64>) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let rows = curve(n, b, &slacks, &adv_fracs).map_err(value_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.adv_frac, r.slack, r.swor_frac, r.poisson_frac))
        .collect())
}

#[pyfunction]
fn analytic_gaussian_epsilon(mu: f64, delta: f64) -> PyResult<f64> {
    gaussian_epsilon(mu, delta).map_err(value_err)
}

/// Per-party noise plan as a dict.
#[pyfunction]
#[pyo3(signature = (sigma, parties, colluders = 0, mode = "tee"))]
fn plan_noise<'py>(
    py: Python<'py>,
    sigma: f64,
    parties: usize,
    colluders: usize,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match mode {
        "tee" => NoiseMode::Tee,
        "collusion_robust" => NoiseMode::CollusionRobust,
        other => return Err(PyValueError::new_err(format!("unknown noise mode {other:?}"))),
    };
    let p = plan(sigma, parties, colluders, mode).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("sigma", p.total_sigma)?;
    out.set_item("sigma_i", p.per_party_sigma)?;
    out.set_item("aggregate_variance", p.aggregate_variance())?;
    Ok(out)
}

/// Exact sum of the rows of `inputs` through the secure summation protocol,
/// decoded from fixed point.
#[pyfunction]
#[pyo3(signature = (inputs, protocol = "pairwise", nodes = 3, seed = 0))]
fn secure_sum(inputs: Vec<Vec<f64>>, protocol: &str, nodes: u32, seed: u64) -> PyResult<Vec<f64>> {
    let protocol = match protocol {
        "pairwise" => ProtocolConfig::Pairwise { group_size: None },
        "dca" => ProtocolConfig::Dca {
            nodes,
            subsets: Default::default(),
        },
        other => return Err(PyValueError::new_err(format!("unknown protocol {other:?}"))),
    };
    let codec = FixedPointCodec::default();
    let encoded = inputs
        .iter()
        .map(|x| codec.encode(x))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let ids: Vec<u32> = (0..encoded.len() as u32).collect();
    let mut sum = InProcessSummation::new(&protocol, &ids, &Seed::from_u64(seed), codec).map_err(value_err)?;
    let outcome = sum.sum_round(0, &encoded).map_err(value_err)?;
    Ok(codec.decode(&outcome.sum))
}

/// Runs an experiment from its JSON config and returns the result JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let config = ExperimentConfig::from_json(config_json).map_err(value_err)?;
    let run = py
        .detach(|| execute(&config))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(run.result.to_json())
}

#[pymodule]
fn dpsmc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(solve_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(effective_fraction_swor, m)?)?;
    m.add_function(wrap_pyfunction!(amplification_curve, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_gaussian_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(plan_noise, m)?)?;
    m.add_function(wrap_pyfunction!(secure_sum, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
