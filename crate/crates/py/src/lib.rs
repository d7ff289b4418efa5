//! Python bindings for `nsattn`.
//!
//! Structured results (reports, summaries) cross the boundary as plain
//! Python dicts and lists built from their JSON form.

use nsattn::attention::{exact_attention, linear_attention_batch, AttentionState, Token};
use nsattn::config::RunConfig;
use nsattn::features::{self, FeatureKind};
use nsattn::fusion::{self, FusionConfig};
use nsattn::pipeline::{self, Preset, ResourceModel};
use nsattn::quantization::{self, FixedPointFormat};
use nsattn::theory::{self, TheoryCheck};
use nsattn::workload;
use nsattn::Error;
use pyo3::exceptions::{PyOverflowError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Overflow { .. } | Error::OutOfRange { .. } => PyOverflowError::new_err(e.to_string()),
        Error::Flow { ref source, .. } if matches!(**source, Error::Overflow { .. }) => {
            PyOverflowError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// Fixed-point format `qB.F`: `B` total bits, `F` fractional bits.
#[pyclass(name = "FixedPointFormat", frozen, eq, hash, skip_from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
struct PyFormat(FixedPointFormat);

#[pymethods]
impl PyFormat {
    #[new]
    fn new(total_bits: u8, fraction_bits: u8) -> PyResult<Self> {
        FixedPointFormat::new(total_bits, fraction_bits)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse(text).map(Self)
    }

    #[getter]
    fn total_bits(&self) -> u8 {
        self.0.total_bits()
    }

    #[getter]
    fn fraction_bits(&self) -> u8 {
        self.0.fraction_bits()
    }

    #[getter]
    fn eta_q(&self) -> f64 {
        self.0.eta_q()
    }

    #[getter]
    fn max_value(&self) -> f64 {
        self.0.max_value()
    }

    /// Round half to even; returns `(raw, value)`.
    fn quantize(&self, x: f64) -> PyResult<(i64, f64)> {
        let v = quantization::quantize(x, self.0).map_err(py_err)?;
        Ok((v.raw(), v.value()))
    }

    fn __repr__(&self) -> String {
        format!("FixedPointFormat('{}')", self.0)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

fn format_arg(f: Option<&str>) -> PyResult<FixedPointFormat> {
    match f {
        Some(s) => parse(s),
        None => FixedPointFormat::new(16, 8).map_err(py_err),
    }
}

/// Seeded random feature map `phi: R^d -> R^m`.
#[pyclass(name = "FeatureMap", frozen)]
struct PyFeatureMap(features::FeatureMap);

#[pymethods]
impl PyFeatureMap {
    #[new]
    #[pyo3(signature = (kind, m, d, seed, clip_bound = 1.0))]
    fn new(kind: &str, m: usize, d: usize, seed: u64, clip_bound: f64) -> PyResult<Self> {
        let kind: FeatureKind = serde_json::from_value(serde_json::Value::String(kind.to_string()))
            .map_err(|e| PyValueError::new_err(format!("unknown feature kind {kind:?}: {e}")))?;
        features::FeatureMap::new(kind, m, d, seed, clip_bound)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.apply(&x).map_err(py_err)
    }

    /// `phi(q) . phi(k)`.
    fn kernel_estimate(&self, q: Vec<f64>, k: Vec<f64>) -> PyResult<f64> {
        features::kernel_estimate(&self.0, &q, &k).map_err(py_err)
    }
}

/// Per-flow fixed-point `S`, `Z` registers.
#[pyclass(name = "AttentionState", skip_from_py_object)]
#[derive(Clone)]
struct PyAttentionState(AttentionState);

#[pymethods]
impl PyAttentionState {
    #[new]
    #[pyo3(signature = (m, d_v, format = None))]
    fn new(m: usize, d_v: usize, format: Option<&str>) -> PyResult<Self> {
        Ok(Self(AttentionState::new(m, d_v, format_arg(format)?)))
    }

    /// Absorb one key/value token. Raises `OverflowError` on a checked
    /// register overflow, leaving the state unchanged.
    #[pyo3(signature = (fm, key, value, token_id = 0))]
    fn update(&mut self, fm: &PyFeatureMap, key: Vec<f64>, value: Vec<f64>, token_id: u64) -> PyResult<()> {
        self.0.update(&fm.0, &Token::new(token_id, key, value)).map_err(py_err)
    }

    /// Returns `(o, normalizer, clamped)`.
    #[pyo3(signature = (fm, q, gamma_floor = None))]
    fn query(&self, fm: &PyFeatureMap, q: Vec<f64>, gamma_floor: Option<f64>) -> PyResult<(Vec<f64>, f64, bool)> {
        let floor = gamma_floor.unwrap_or_else(|| self.0.formats().1.lsb());
        let out = self.0.query(&fm.0, &q, floor).map_err(py_err)?;
        Ok((out.o, out.normalizer, out.clamped))
    }

    fn merge(&self, other: &PyAttentionState) -> PyResult<Self> {
        self.0.merge(&other.0).map(Self).map_err(py_err)
    }

    fn same_registers(&self, other: &PyAttentionState) -> bool {
        self.0.same_registers(&other.0)
    }

    #[getter]
    fn t(&self) -> u64 {
        self.0.t()
    }

    #[getter]
    fn s_raw(&self) -> Vec<i64> {
        self.0.s_raw().to_vec()
    }

    #[getter]
    fn z_raw(&self) -> Vec<i64> {
        self.0.z_raw().to_vec()
    }

    fn s_matrix(&self) -> Vec<Vec<f64>> {
        self.0.s_matrix()
    }

    fn z_vector(&self) -> Vec<f64> {
        self.0.z_vector()
    }

    #[getter]
    fn storage_bits(&self) -> u64 {
        self.0.storage_bits()
    }
}

/// Validated run configuration.
#[pyclass(name = "RunConfig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        match toml {
            Some(text) => RunConfig::from_toml(text).map(Self).map_err(py_err),
            None => Ok(Self(RunConfig::default())),
        }
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(Self).map_err(py_err)
    }

    /// New config with `section.key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        self.0.with_overrides(&overrides).map(Self).map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn hash(&self) -> String {
        self.0.hash()
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }
}

fn config_or_default(config: Option<&PyRunConfig>) -> RunConfig {
    config.map_or_else(RunConfig::default, |c| c.0.clone())
}

/// Row-wise softmax attention.
#[pyfunction]
fn exact_attention_rows(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, d: usize) -> PyResult<Vec<Vec<f64>>> {
    exact_attention(&q, &k, &v, d).map_err(py_err)
}

/// Kernel-linearized attention in `f64`.
#[pyfunction]
#[pyo3(signature = (fm, q, k, v, gamma_floor = 1e-12))]
fn linear_attention(
    fm: &PyFeatureMap,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    gamma_floor: f64,
) -> PyResult<Vec<Vec<f64>>> {
    linear_attention_batch(&fm.0, &q, &k, &v, gamma_floor).map_err(py_err)
}

/// Feature count for an `eps`-accurate kernel on `n` pairs with probability
/// `1 - delta`.
#[pyfunction]
fn required_m(c: f64, eps: f64, n: u64, delta: f64) -> PyResult<u64> {
    features::required_m(c, eps, n, delta).map_err(py_err)
}

/// Largest token count a register absorbs without overflow.
#[pyfunction]
#[pyo3(signature = (format, b_phi, r_v, m, d_v))]
fn overflow_horizon(format: &str, b_phi: f64, r_v: f64, m: usize, d_v: usize) -> PyResult<u64> {
    Ok(quantization::register_overflow_horizon(
        parse(format)?,
        b_phi,
        r_v,
        m,
        d_v,
    ))
}

/// Cascade fusion; returns `(score, path)`.
#[pyfunction]
#[pyo3(signature = (s_nn, i_sym, s_sym, alpha = 1.0, beta = 1.0, lambda_h = 1))]
fn fuse(s_nn: f64, i_sym: u8, s_sym: f64, alpha: f64, beta: f64, lambda_h: u8) -> PyResult<(f64, String)> {
    let cfg = FusionConfig::new(alpha, beta, lambda_h).map_err(py_err)?;
    let out = fusion::fuse(s_nn, i_sym, s_sym, &cfg);
    Ok((out.value, out.path.as_str().to_string()))
}

/// Budget inequalities against the default resource model, as a dict with a
/// `text` rendering.
#[pyfunction]
#[pyo3(signature = (m, d_v, b, window = 8, d = 4, n_entries = 0))]
fn check_budgets<'py>(
    py: Python<'py>,
    m: u64,
    d_v: u64,
    b: u64,
    window: u64,
    d: u64,
    n_entries: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = pipeline::check_budgets(&ResourceModel::default(), m, d_v, b, window, d, n_entries);
    let out = to_py(py, &report)?;
    out.cast::<PyDict>()?.set_item("text", report.to_text())?;
    Ok(out)
}

/// Run one or all empirical bound checks.
#[pyfunction]
#[pyo3(signature = (which = "all", config = None))]
fn theory_check<'py>(py: Python<'py>, which: &str, config: Option<&PyRunConfig>) -> PyResult<Bound<'py, PyAny>> {
    let which: TheoryCheck = parse(which)?;
    let report = theory::theory_check(which, &config_or_default(config)).map_err(py_err)?;
    to_py(py, &report)
}

/// Generate the configured workload and return the run summary of one
/// preset.
#[pyfunction]
#[pyo3(signature = (config = None, preset = None))]
fn simulate<'py>(py: Python<'py>, config: Option<&PyRunConfig>, preset: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_or_default(config);
    let preset: Preset = match preset {
        Some(p) => serde_json::from_value(serde_json::Value::String(p.to_string()))
            .map_err(|e| PyValueError::new_err(format!("unknown preset {p:?}: {e}")))?,
        None => cfg.simulate.preset,
    };
    let summary = py.detach(|| -> nsattn::Result<_> {
        let trace = workload::generate(&cfg.workload)?;
        Ok(pipeline::simulate(&cfg, &trace, preset, None)?.summary)
    });
    to_py(py, &summary.map_err(py_err)?)
}

#[pymodule]
fn nsattn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFormat>()?;
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyAttentionState>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(exact_attention_rows, m)?)?;
    m.add_function(wrap_pyfunction!(linear_attention, m)?)?;
    m.add_function(wrap_pyfunction!(required_m, m)?)?;
    m.add_function(wrap_pyfunction!(overflow_horizon, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(check_budgets, m)?)?;
    m.add_function(wrap_pyfunction!(theory_check, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
