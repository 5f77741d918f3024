//! Python module `wnvi_py`. Build with the `extension-module` feature (or
//! maturin) to get an importable shared library.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use wnvi::constitutive::{self, IsoParams, TransIsoParams};
use wnvi::forward::{assemble_linear_system, BoundaryConditions, LoadCase};
use wnvi::mesh::TriMesh;
use wnvi::run::{self, RunConfig};
use wnvi::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn load_config(config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(py_err)?,
        None => RunConfig::default(),
    };
    if let Some(out) = out {
        cfg.output = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_u64() {
            Some(u) => u.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

/// Cauchy stress `(s11, s12, s22)` of the transversely isotropic law.
#[pyfunction]
#[pyo3(signature = (grad_u, e, e_a, nu, g_a, axis=(1.0, 0.0)))]
fn transiso_stress(grad_u: [[f64; 2]; 2], e: f64, e_a: f64, nu: f64, g_a: f64, axis: (f64, f64)) -> PyResult<(f64, f64, f64)> {
    let p = TransIsoParams {
        e,
        e_a,
        nu,
        g_a,
        axis: [axis.0, axis.1],
    };
    let s = constitutive::transiso_stress(&grad_u, &p).map_err(py_err)?;
    Ok((s.s11, s.s12, s.s22))
}

/// Plane-strain linear isotropic stress `(s11, s12, s22)`.
#[pyfunction]
fn linear_stress(grad_u: [[f64; 2]; 2], e: f64, nu: f64) -> PyResult<(f64, f64, f64)> {
    let p = IsoParams::new(e, nu).map_err(py_err)?;
    let s = constitutive::linear_isotropic_stress(&grad_u, &p).map_err(py_err)?;
    Ok((s.s11, s.s12, s.s22))
}

/// Linear solve on an `n x n` grid with element moduli `e` under the default
/// load case. Returns nodal displacements, `dof = 2 * node + comp`.
#[pyfunction]
fn solve_linear(n: usize, e: Vec<f64>, nu: f64) -> PyResult<Vec<f64>> {
    let mesh = TriMesh::build_grid(n).map_err(py_err)?;
    if e.len() != mesh.n_elements() {
        return Err(PyValueError::new_err(format!("expected {} moduli, got {}", mesh.n_elements(), e.len())));
    }
    let bc = BoundaryConditions::from_load_case(&mesh, &LoadCase::default()).map_err(py_err)?;
    assemble_linear_system(&mesh, &e, nu, &bc).and_then(|s| s.solve()).map_err(py_err)
}

/// Reads a `.field` file into a dict with `kind`, `components`, `values`
/// (one list per row), `config` and `seed`.
#[pyfunction]
fn read_field<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let f = wnvi::postproc::read_field(&path).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("kind", f.kind.as_str())?;
    d.set_item("components", f.components)?;
    let rows: Vec<Vec<f64>> = (0..f.n()).map(|i| f.row(i).to_vec()).collect();
    d.set_item("values", rows)?;
    d.set_item("config", &f.meta.config_hash)?;
    d.set_item("seed", f.meta.seed)?;
    Ok(d)
}

/// Writes truth fields and observations.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None))]
fn generate(config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<()> {
    let cfg = load_config(config, out, seed)?;
    run::generate(&cfg, &cfg.output).map_err(py_err)?;
    Ok(())
}

/// Trains (or resumes) and returns the number of completed iterations.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None, iters=None))]
fn infer(py: Python<'_>, config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>, iters: Option<u64>) -> PyResult<u64> {
    let mut cfg = load_config(config, out, seed)?;
    if let Some(n) = iters {
        cfg.inference.max_iters = n;
    }
    let r = py.detach(|| run::infer(&cfg, &cfg.output, None, false)).map_err(py_err)?;
    Ok(r.state.iteration)
}

/// Writes the report and returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (config=None, out=None, seed=None, threads=1))]
fn report<'py>(py: Python<'py>, config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>, threads: usize) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(config, out, seed)?;
    let s = py.detach(|| run::report(&cfg, &cfg.output, None, threads)).map_err(py_err)?;
    let v = serde_json::to_value(&s).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// `[(points, noise_percent), ...]`
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn mc_study(py: Python<'_>, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<Vec<(usize, f64)>> {
    let cfg = load_config(config, None, seed)?;
    let rows = py.detach(|| run::mc_study(&cfg)).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.points, r.noise)).collect())
}

#[pymodule]
fn wnvi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(transiso_stress, m)?)?;
    m.add_function(wrap_pyfunction!(linear_stress, m)?)?;
    m.add_function(wrap_pyfunction!(solve_linear, m)?)?;
    m.add_function(wrap_pyfunction!(read_field, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(mc_study, m)?)?;
    Ok(())
}
