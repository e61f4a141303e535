//! Python bindings: simulation, losses, intrinsic dimension, metrics,
//! symbolic regression and the full pipeline.

use std::collections::HashMap;
use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tide_core::config::ExperimentConfig;
use tide_core::idest::{danco_estimate, two_nn, DancoConfig, PointCloud};
use tide_core::metrics::{self, Role, VariableMatrix};
use tide_core::net::{self, LatentGaussian};
use tide_core::symreg::{self, ExpressionTree, Samples, SymregConfig};
use tide_core::sysgen::{self, SystemKind, SystemSpec};
use tide_core::tensor::Tensor;

fn to_py(e: tide_core::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

fn system(name: &str) -> PyResult<SystemSpec> {
    let kind: SystemKind = serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown system `{name}`")))?;
    Ok(SystemSpec::new(kind))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(to_py)
}

fn samples(inputs: HashMap<String, Vec<f64>>) -> PyResult<Samples> {
    let mut cols: Vec<_> = inputs.into_iter().collect();
    cols.sort_by(|a, b| a.0.cmp(&b.0));
    let (names, columns) = cols.into_iter().unzip();
    Samples::new(names, columns).map_err(to_py)
}

/// Integrate a system from `init` for `steps` steps of size `dt`.
#[pyfunction]
fn simulate(system_name: &str, init: Vec<f64>, dt: f64, steps: usize) -> PyResult<Vec<Vec<f64>>> {
    let spec = system(system_name)?;
    Ok(sysgen::simulate(&spec, &init, dt, steps).map_err(to_py)?.states)
}

#[pyfunction]
fn energy(system_name: &str, state: Vec<f64>) -> PyResult<f64> {
    sysgen::energy(&system(system_name)?, &state).map_err(to_py)
}

/// Grayscale frame in row-major order.
#[pyfunction]
#[pyo3(signature = (system_name, state, height=32, width=32))]
fn render_frame(system_name: &str, state: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
    sysgen::render_frame(&system(system_name)?, &state, height, width).map_err(to_py)
}

/// KL divergence of diagonal Gaussians to N(0, I), summed over latent
/// dimensions and averaged over rows.
#[pyfunction]
fn kl_to_standard_normal(mean: Vec<Vec<f64>>, logvar: Vec<Vec<f64>>) -> PyResult<f64> {
    let lg = LatentGaussian::new(matrix(&mean)?, matrix(&logvar)?).map_err(to_py)?;
    Ok(net::kl_to_standard_normal(&lg))
}

/// Spectral smoothness penalty summed over latent sequences.
#[pyfunction]
#[pyo3(signature = (sequences, order=4, omega=5.0))]
fn smoothness(sequences: Vec<Vec<Vec<f64>>>, order: usize, omega: f64) -> PyResult<f64> {
    let seqs = sequences.iter().map(|s| matrix(s)).collect::<PyResult<Vec<_>>>()?;
    metrics::smoothness(&seqs, order, omega).map_err(to_py)
}

/// DANCo estimate of a point cloud, plus the TwoNN cross-check.
#[pyfunction]
#[pyo3(signature = (points, k=10, d_max=16, seed=0))]
fn estimate_id<'py>(
    py: Python<'py>,
    points: Vec<Vec<f64>>,
    k: usize,
    d_max: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cloud = PointCloud::from_rows(points);
    let cfg = DancoConfig { k, d_max, seed };
    let cache = tide_core::idest::default_cache_dir();
    let r = danco_estimate(&cloud, &cfg, Some(&cache)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("id", r.id_fractional)?;
    d.set_item("id_grid", r.id_grid)?;
    d.set_item("kl_curve", r.kl_curve)?;
    d.set_item("points", r.points)?;
    d.set_item("duplicates_removed", r.duplicates_removed)?;
    d.set_item("two_nn", two_nn(&cloud).map_err(to_py)?)?;
    Ok(d)
}

/// KDE mutual information in nats between two sample matrices.
#[pyfunction]
fn mutual_information(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let x = VariableMatrix::numbered(matrix(&x)?, Role::Model, "x").map_err(to_py)?;
    let y = VariableMatrix::numbered(matrix(&y)?, Role::Human, "y").map_err(to_py)?;
    Ok(metrics::mutual_information(&x, &y).map_err(to_py)?.mi)
}

#[pyclass(name = "Expression", module = "tide")]
struct Expression {
    inner: ExpressionTree,
}

#[pymethods]
impl Expression {
    /// Parse prefix notation such as `(add (mul 2.0 x) 1.0)`.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let inner = ExpressionTree::parse_prefix(text).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn evaluate(&self, inputs: HashMap<String, Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.evaluate(&samples(inputs)?).map_err(to_py)
    }

    fn simplify(&self) -> Self {
        Self { inner: self.inner.simplify() }
    }

    #[getter]
    fn complexity(&self) -> usize {
        self.inner.complexity()
    }

    #[getter]
    fn variables(&self) -> Vec<String> {
        self.inner.variables.clone()
    }

    fn prefix(&self) -> String {
        self.inner.to_prefix()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Expression('{}')", self.inner.to_prefix())
    }
}

/// Pareto front of (complexity, mse, expression) for `target` over `inputs`.
#[pyfunction]
#[pyo3(signature = (inputs, target, generations=200, population=200, islands=4, seed=0))]
fn fit_expression(
    inputs: HashMap<String, Vec<f64>>,
    target: Vec<f64>,
    generations: usize,
    population: usize,
    islands: usize,
    seed: u64,
) -> PyResult<Vec<(usize, f64, Expression)>> {
    let cfg = SymregConfig { generations, population, islands, seed, ..SymregConfig::default() };
    let front = symreg::fit(&samples(inputs)?, &target, &cfg).map_err(to_py)?;
    Ok(front
        .entries
        .into_iter()
        .map(|e| (e.complexity, e.mse, Expression { inner: e.expression }))
        .collect())
}

/// Run every pipeline step for a config file and return metrics.json text.
#[pyfunction]
#[pyo3(signature = (config_path, out=None))]
fn run_pipeline(py: Python<'_>, config_path: &str, out: Option<&str>) -> PyResult<String> {
    py.detach(|| -> tide_core::Result<String> {
        let cfg = ExperimentConfig::load(Path::new(config_path))?;
        let pipe = tide_core::pipeline::Pipeline::new(&cfg, out.map(Path::new))?;
        let (bundle, _) = pipe.run()?;
        Ok(std::fs::read_to_string(bundle.metrics)?)
    })
    .map_err(to_py)
}

#[pymodule]
fn tide(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(render_frame, m)?)?;
    m.add_function(wrap_pyfunction!(kl_to_standard_normal, m)?)?;
    m.add_function(wrap_pyfunction!(smoothness, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_id, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(fit_expression, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_class::<Expression>()?;
    Ok(())
}
