//! Python bindings: SABR analytics, single-smile calibration and the
//! pipeline commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use volgibbs::calibration::{calibrate_slice, CalibrationOptions, SmileSlice};
use volgibbs::hedge::Strategy;
use volgibbs::pipeline::{self, PipelineConfig, Summary};
use volgibbs::sabr::{self, DiscountCurve, SabrParams, SwaptionKind, SwaptionSpec};
use volgibbs::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn config(config: Option<PathBuf>, profile: &str, seed: Option<u64>, out: Option<PathBuf>) -> PyResult<PipelineConfig> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::read(p),
        None => PipelineConfig::profile(profile),
    }
    .map_err(py_err)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn kind(name: &str) -> PyResult<SwaptionKind> {
    match name {
        "payer" => Ok(SwaptionKind::Payer),
        "receiver" => Ok(SwaptionKind::Receiver),
        _ => Err(PyValueError::new_err(format!("kind must be 'payer' or 'receiver', got {name:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn spec(forward: f64, strike: f64, expiry: f64, tenor: f64, kind_name: &str, notional: f64, rate: f64) -> PyResult<SwaptionSpec> {
    SwaptionSpec::regular(forward, strike, 0.0, expiry, tenor, 4, notional, kind(kind_name)?, DiscountCurve::flat(rate))
        .map_err(py_err)
}

fn params(alpha: f64, beta: f64, nu: f64, rho: f64, shift: f64) -> PyResult<SabrParams> {
    SabrParams::new(alpha, beta, nu, rho, shift).map_err(py_err)
}

fn summary_dict<'py>(py: Python<'py>, s: &Summary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("lines", s.lines.clone())?;
    d.set_item("outputs", s.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())?;
    d.set_item("manifest", s.manifest.display().to_string())?;
    Ok(d)
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Built-in profile ("desk" or "full") as a JSON string.
#[pyfunction]
#[pyo3(signature = (profile = "desk"))]
fn default_config(profile: &str) -> PyResult<String> {
    let cfg = PipelineConfig::profile(profile).map_err(py_err)?;
    serde_json::to_string_pretty(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Shifted-SABR normal volatility in decimal rate units, valued at t = 0.
#[pyfunction]
#[pyo3(signature = (alpha, beta, nu, rho, forward, strike, expiry, shift = sabr::DEFAULT_SHIFT))]
#[allow(clippy::too_many_arguments)]
fn sabr_normal_vol(alpha: f64, beta: f64, nu: f64, rho: f64, forward: f64, strike: f64, expiry: f64, shift: f64) -> PyResult<f64> {
    sabr::sabr_normal_vol(&params(alpha, beta, nu, rho, shift)?, forward, strike, 0.0, expiry).map_err(py_err)
}

/// Swaption premium under shifted SABR with quarterly payments and a flat
/// continuously compounded discount rate.
#[pyfunction]
#[pyo3(signature = (alpha, beta, nu, rho, forward, strike, expiry, tenor, kind = "payer", notional = 1.0, rate = 0.01, shift = sabr::DEFAULT_SHIFT))]
#[allow(clippy::too_many_arguments)]
fn sabr_price(
    alpha: f64,
    beta: f64,
    nu: f64,
    rho: f64,
    forward: f64,
    strike: f64,
    expiry: f64,
    tenor: f64,
    kind: &str,
    notional: f64,
    rate: f64,
    shift: f64,
) -> PyResult<f64> {
    let s = spec(forward, strike, expiry, tenor, kind, notional, rate)?;
    sabr::sabr_price(&params(alpha, beta, nu, rho, shift)?, &s).map_err(py_err)
}

/// dV/dF at fixed α, same conventions as `sabr_price`.
#[pyfunction]
#[pyo3(signature = (alpha, beta, nu, rho, forward, strike, expiry, tenor, kind = "payer", notional = 1.0, rate = 0.01, shift = sabr::DEFAULT_SHIFT))]
#[allow(clippy::too_many_arguments)]
fn sabr_delta(
    alpha: f64,
    beta: f64,
    nu: f64,
    rho: f64,
    forward: f64,
    strike: f64,
    expiry: f64,
    tenor: f64,
    kind: &str,
    notional: f64,
    rate: f64,
    shift: f64,
) -> PyResult<f64> {
    let s = spec(forward, strike, expiry, tenor, kind, notional, rate)?;
    sabr::sabr_delta(&params(alpha, beta, nu, rho, shift)?, &s).map_err(py_err)
}

/// Fits α, ν and ρ to one smile. `vols_bp` entries may be None for missing
/// quotes. Returns a dict with the parameters and fit diagnostics.
#[pyfunction]
#[pyo3(signature = (strikes, vols_bp, forward, maturity, tenor, beta = 0.5, shift = sabr::DEFAULT_SHIFT))]
#[allow(clippy::too_many_arguments)]
fn calibrate_smile<'py>(
    py: Python<'py>,
    strikes: Vec<f64>,
    vols_bp: Vec<Option<f64>>,
    forward: f64,
    maturity: f64,
    tenor: f64,
    beta: f64,
    shift: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if strikes.len() != vols_bp.len() {
        return Err(PyValueError::new_err(format!(
            "{} strikes but {} vols",
            strikes.len(),
            vols_bp.len()
        )));
    }
    let slice = SmileSlice {
        maturity,
        tenor,
        forward,
        weights: vec![1.0; strikes.len()],
        strikes,
        vols: vols_bp,
    };
    let opts = CalibrationOptions {
        beta,
        shift,
        ..CalibrationOptions::default()
    };
    let (p, report) = calibrate_slice(&slice, &opts).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("alpha", p.alpha)?;
    d.set_item("beta", p.beta)?;
    d.set_item("nu", p.nu)?;
    d.set_item("rho", p.rho)?;
    d.set_item("shift", p.shift)?;
    d.set_item("iterations", report.iterations)?;
    d.set_item("mae_bp", report.mae_bp)?;
    d.set_item("alpha_only", report.kind == volgibbs::calibration::FitKind::AlphaOnly)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (out, config = None, profile = "desk", seed = None, count = None))]
fn synth<'py>(
    py: Python<'py>,
    out: PathBuf,
    config: Option<PathBuf>,
    profile: &str,
    seed: Option<u64>,
    count: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = self::config(config, profile, seed, Some(out))?;
    if let Some(n) = count {
        cfg.n_train = n;
    }
    let s = py.detach(|| pipeline::cmd_synth(&cfg)).map_err(py_err)?;
    summary_dict(py, &s)
}

#[pyfunction]
#[pyo3(signature = (out, data = None, config = None, profile = "desk", seed = None, epochs = None))]
fn train<'py>(
    py: Python<'py>,
    out: PathBuf,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    profile: &str,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = self::config(config, profile, seed, Some(out))?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let data = data.unwrap_or_else(|| cfg.out_dir.join("training_set"));
    let s = py.detach(|| pipeline::cmd_train(&cfg, &data)).map_err(py_err)?;
    summary_dict(py, &s)
}

#[pyfunction]
#[pyo3(signature = (out, model, cube, mask_rate = None, config = None, profile = "desk", seed = None))]
#[allow(clippy::too_many_arguments)]
fn impute<'py>(
    py: Python<'py>,
    out: PathBuf,
    model: PathBuf,
    cube: PathBuf,
    mask_rate: Option<f64>,
    config: Option<PathBuf>,
    profile: &str,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config, profile, seed, Some(out))?;
    let s = py.detach(|| pipeline::cmd_impute(&cfg, &model, &cube, mask_rate)).map_err(py_err)?;
    summary_dict(py, &s)
}

#[pyfunction]
#[pyo3(signature = (out, cube, forwards = None, config = None, profile = "desk"))]
fn calibrate<'py>(
    py: Python<'py>,
    out: PathBuf,
    cube: PathBuf,
    forwards: Option<PathBuf>,
    config: Option<PathBuf>,
    profile: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config, profile, None, Some(out))?;
    let s = py
        .detach(|| pipeline::cmd_calibrate(&cfg, &cube, forwards.as_deref()))
        .map_err(py_err)?;
    summary_dict(py, &s)
}

/// Runs the hedging study. Returns the summary dict plus the report as a
/// JSON string under "report".
#[pyfunction]
#[pyo3(signature = (out, model = None, strategies = None, paths = None, config = None, profile = "desk", seed = None))]
#[allow(clippy::too_many_arguments)]
fn hedge<'py>(
    py: Python<'py>,
    out: PathBuf,
    model: Option<PathBuf>,
    strategies: Option<Vec<String>>,
    paths: Option<usize>,
    config: Option<PathBuf>,
    profile: &str,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = self::config(config, profile, seed, Some(out))?;
    if let Some(n) = paths {
        cfg.hedge.n_paths = n;
    }
    let strategies: Vec<Strategy> = match strategies {
        None => Strategy::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Strategy>().map_err(|e| PyValueError::new_err(e.to_string())))
            .collect::<PyResult<_>>()?,
    };
    let (s, report) = py
        .detach(|| pipeline::cmd_hedge(&cfg, model.as_deref(), &strategies, false))
        .map_err(py_err)?;
    let d = summary_dict(py, &s)?;
    d.set_item(
        "report",
        serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?,
    )?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (out, model, data = None, config = None, profile = "desk", seed = None))]
fn diagnose<'py>(
    py: Python<'py>,
    out: PathBuf,
    model: PathBuf,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    profile: &str,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config, profile, seed, Some(out))?;
    let data = data.unwrap_or_else(|| cfg.out_dir.join("training_set"));
    let s = py.detach(|| pipeline::cmd_diagnose(&cfg, &model, &data)).map_err(py_err)?;
    summary_dict(py, &s)
}

#[pymodule]
fn pyvolgibbs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(sabr_normal_vol, m)?)?;
    m.add_function(wrap_pyfunction!(sabr_price, m)?)?;
    m.add_function(wrap_pyfunction!(sabr_delta, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_smile, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(impute, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(hedge, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    Ok(())
}
