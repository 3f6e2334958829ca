//! Python bindings. Matrices cross the boundary as lists of rows; structured
//! reports come back as dicts.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use smnreg::diagnostics::{self, Functional};
use smnreg::ergodicity;
use smnreg::gibbs::{self, ChainSettings, SamplerSpec};
use smnreg::{model, ChainState, Dataset, Error, MixingDensity, NIWPrior};

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_)
        | Error::Dimension(_)
        | Error::NotPositiveDefinite { .. }
        | Error::RankDeficient(_)
        | Error::Precondition(_)
        | Error::DivergentMoment(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what} must be a non-empty list of equal-length rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Dataset> {
    Dataset::new(matrix(x, "x")?, matrix(y, "y")?).map_err(err)
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

/// Converts a serializable report to nested Python dicts and lists.
/// Non-finite floats, which JSON cannot carry, come back as `None`.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// Mixing density `h` of the latent precision weights.
#[pyclass(name = "Mixing", frozen, from_py_object)]
#[derive(Clone)]
struct PyMixing(MixingDensity);

#[pymethods]
impl PyMixing {
    #[staticmethod]
    fn gamma(shape: f64, rate: f64) -> PyResult<Self> {
        MixingDensity::gamma(shape, rate).map(Self).map_err(err)
    }

    /// `Gamma(nu/2, nu/2)`: multivariate Student-t errors.
    #[staticmethod]
    fn student_t(nu: f64) -> PyResult<Self> {
        MixingDensity::student_t(nu).map(Self).map_err(err)
    }

    #[staticmethod]
    fn point_mass(u0: f64) -> PyResult<Self> {
        MixingDensity::point_mass(u0).map(Self).map_err(err)
    }

    #[staticmethod]
    fn tabulated(grid: Vec<f64>, values: Vec<f64>) -> PyResult<Self> {
        MixingDensity::tabulated(grid, values).map(Self).map_err(err)
    }

    fn density(&self, u: f64) -> f64 {
        self.0.density(u)
    }

    /// `∫ u^k h(u) du`; `inf` when divergent.
    fn moment(&self, k: f64) -> f64 {
        self.0.moment(k).value
    }

    /// `E[u^r | δ]` under the density proportional to `h(u) u^{d/2} e^{-uδ/2}`.
    fn conditional_moment(&self, delta: f64, d: usize, r: f64) -> PyResult<f64> {
        Ok(self.0.conditional_moment(delta, d, r).map_err(err)?.value)
    }

    fn __repr__(&self) -> String {
        format!("Mixing({:?})", self.0)
    }
}

fn make_prior(
    p: usize,
    d: usize,
    b: Option<Vec<Vec<f64>>>,
    a: Option<Vec<Vec<f64>>>,
    nu: Option<f64>,
    theta: Option<Vec<Vec<f64>>>,
) -> PyResult<NIWPrior> {
    let default = NIWPrior::weakly_informative(p, d);
    let b = b.map(|m| matrix(m, "b")).transpose()?.unwrap_or_else(|| default.b().clone());
    let a = a.map(|m| matrix(m, "a")).transpose()?.unwrap_or_else(|| default.a().clone());
    let theta = theta.map(|m| matrix(m, "theta")).transpose()?.unwrap_or_else(|| default.theta().clone());
    NIWPrior::new(b, a, nu.unwrap_or(default.nu()), theta).map_err(err)
}

/// Posterior update at weights `u`: returns `(psi, gamma, omega)`.
#[pyfunction]
#[pyo3(signature = (u, x, y, b=None, a=None, nu=None, theta=None))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn compute_update(
    u: Vec<f64>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    b: Option<Vec<Vec<f64>>>,
    a: Option<Vec<Vec<f64>>>,
    nu: Option<f64>,
    theta: Option<Vec<Vec<f64>>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let data = dataset(x, y)?;
    let prior = make_prior(data.p(), data.d(), b, a, nu, theta)?;
    let upd = model::compute_update(&DVector::from_vec(u), &data, &prior).map_err(err)?;
    Ok((rows(&upd.psi), rows(&upd.gamma), rows(&upd.omega)))
}

/// `tr Σ⁻¹ + tr βΣ⁻¹βᵀ`.
#[pyfunction]
fn energy_quadratic(beta: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> PyResult<f64> {
    let beta = matrix(beta, "beta")?;
    let sigma = matrix(sigma, "sigma")?;
    let state = ChainState::new(beta, sigma, DVector::from_element(1, 1.0)).map_err(err)?;
    ergodicity::energy_quadratic(&state).map_err(err)
}

/// `Σᵢ (yᵢ − βᵀxᵢ)ᵀ Σ⁻¹ (yᵢ − βᵀxᵢ)`.
#[pyfunction]
fn energy_proper(beta: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let data = dataset(x, y)?;
    let state = ChainState::new(matrix(beta, "beta")?, matrix(sigma, "sigma")?, DVector::from_element(data.n(), 1.0))
        .map_err(err)?;
    ergodicity::energy_proper(&state, &data).map_err(err)
}

#[pyfunction]
fn check_improper_condition<'py>(py: Python<'py>, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, nu_t: f64) -> PyResult<Bound<'py, PyAny>> {
    let report = ergodicity::check_improper_condition(&dataset(x, y)?, nu_t).map_err(err)?;
    to_py(py, &report)
}

/// Geometric and uniform ergodicity checks for the proper chain.
#[pyfunction]
fn check_proper<'py>(py: Python<'py>, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, mixing: PyMixing) -> PyResult<Bound<'py, PyAny>> {
    let data = dataset(x, y)?;
    let d = PyDict::new(py);
    d.set_item("geometric", to_py(py, &ergodicity::check_proper_geometric(&mixing.0, data.d()))?)?;
    d.set_item("uniform", to_py(py, &ergodicity::check_uniform(&data, &mixing.0))?)?;
    Ok(d.into_any())
}

/// Runs one chain. With `nu_t` set the improper chain is used and `mixing`
/// must be absent; otherwise `mixing` is required and the weakly informative
/// prior applies. Returns `{"columns", "rows", "meta"}`.
#[pyfunction]
#[pyo3(signature = (x, y, iters, burnin=0, thin=1, seed=1, mixing=None, nu_t=None, emit_u=false))]
#[allow(clippy::too_many_arguments)]
fn run_chain<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    iters: usize,
    burnin: usize,
    thin: usize,
    seed: u64,
    mixing: Option<PyMixing>,
    nu_t: Option<f64>,
    emit_u: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let data = dataset(x, y)?;
    let spec = match (mixing, nu_t) {
        (Some(m), None) => SamplerSpec::proper(NIWPrior::weakly_informative(data.p(), data.d()), m.0),
        (None, Some(nu)) => SamplerSpec::improper_t(nu).map_err(err)?,
        _ => return Err(PyValueError::new_err("pass exactly one of `mixing` (proper) or `nu_t` (improper)")),
    };
    spec.validate(&data).map_err(err)?;
    let settings = ChainSettings::new(iters, burnin, thin).map_err(err)?;
    let trace = py.detach(|| gibbs::run_chain(&spec, &data, None, settings, seed)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("columns", trace.columns(emit_u))?;
    let body: Vec<Vec<f64>> = trace.states.iter().map(|s| gibbs::Trace::row(s, emit_u)).collect();
    d.set_item("rows", body)?;
    d.set_item("meta", to_py(py, &trace.meta)?)?;
    Ok(d.into_any())
}

#[pyfunction]
fn ess(series: Vec<f64>) -> PyResult<f64> {
    diagnostics::ess(&series).map_err(err)
}

/// Geweke joint-distribution test of the proper sampler under the prior
/// `B = 0, A = I, ν = d + 6, Θ = I`.
#[pyfunction]
#[pyo3(signature = (n, p, d, mixing, iterations, seed=1))]
fn geweke<'py>(py: Python<'py>, n: usize, p: usize, d: usize, mixing: PyMixing, iterations: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let prior = NIWPrior::new(DMatrix::zeros(p, d), DMatrix::identity(p, p), d as f64 + 6.0, DMatrix::identity(d, d)).map_err(err)?;
    let report = py
        .detach(|| diagnostics::geweke_joint_test((n, p, d), &prior, &mixing.0, iterations, seed))
        .map_err(err)?;
    to_py(py, &report)
}

/// Names of the functionals reported by `fit` summaries.
#[pyfunction]
fn summary_functionals(p: usize, d: usize) -> Vec<String> {
    Functional::summary_set(p, d).iter().map(Functional::name).collect()
}

#[pymodule]
fn smnreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMixing>()?;
    m.add_function(wrap_pyfunction!(compute_update, m)?)?;
    m.add_function(wrap_pyfunction!(energy_quadratic, m)?)?;
    m.add_function(wrap_pyfunction!(energy_proper, m)?)?;
    m.add_function(wrap_pyfunction!(check_improper_condition, m)?)?;
    m.add_function(wrap_pyfunction!(check_proper, m)?)?;
    m.add_function(wrap_pyfunction!(run_chain, m)?)?;
    m.add_function(wrap_pyfunction!(ess, m)?)?;
    m.add_function(wrap_pyfunction!(geweke, m)?)?;
    m.add_function(wrap_pyfunction!(summary_functionals, m)?)?;
    Ok(())
}
