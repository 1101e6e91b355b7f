//! Python bindings: datasets, networks, one-shot and iterative pruning, and
//! the block solvers.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use icbs_core::checkpoint::{self, Checkpoint};
use icbs_core::config::RunConfig;
use icbs_core::pruner::{baseline_from_config, run_icbs};
use icbs_core::scoring::ScoringSpec;
use icbs_core::solver::{self, SaSchedule};
use icbs_core::{data, nn, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Dataset", module = "icbs", from_py_object)]
#[derive(Clone)]
struct PyDataset(data::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        data::load_idx(&images, &labels, data::Split::Train)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (seed, n_samples, n_classes = 10, dim = 784))]
    fn synthetic(seed: u64, n_samples: usize, n_classes: usize, dim: usize) -> Self {
        Self(data::synthetic_blobs(seed, n_samples, n_classes, dim))
    }

    /// Splits off the last `n_valid` samples; returns `(train, valid)`.
    fn split(&self, n_valid: usize) -> (Self, Self) {
        let (a, b) = self.0.clone().split_off(n_valid);
        (Self(a), Self(b))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Mlp", module = "icbs", from_py_object)]
#[derive(Clone)]
struct PyMlp {
    model: nn::Mlp,
    seed: u64,
    mask: Option<Vec<bool>>,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (dims, seed = 0))]
    fn new(dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(PyValueError::new_err("dims need at least two positive widths"));
        }
        Ok(Self {
            model: nn::Mlp::new(&dims, seed),
            seed,
            mask: None,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = checkpoint::load(&path).map_err(to_py)?;
        Ok(Self {
            model: ck.model,
            seed: ck.init_seed,
            mask: ck.mask,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(
            &path,
            &Checkpoint {
                model: self.model.clone(),
                init_seed: self.seed,
                training: None,
                mask: self.mask.clone(),
            },
        )
        .map_err(to_py)
    }

    /// SGD training; returns the per-epoch mean training loss.
    #[pyo3(signature = (data, epochs, lr = 0.01, batch_size = 64, seed = 0))]
    fn train(&mut self, data: &PyDataset, epochs: usize, lr: f64, batch_size: usize, seed: u64) -> PyResult<Vec<f64>> {
        let opts = nn::TrainOptions {
            epochs,
            lr,
            batch_size,
            seed,
            plateau: None,
        };
        let report = self.model.train_sgd(&data.0, &opts).map_err(to_py)?;
        self.mask = None;
        Ok(report.epoch_losses)
    }

    /// `(loss, accuracy)` over the whole dataset.
    #[pyo3(signature = (data, batch_size = 4096))]
    fn evaluate(&self, data: &PyDataset, batch_size: usize) -> PyResult<(f64, f64)> {
        self.model.evaluate(&data.0, batch_size).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.model.dims()
    }

    #[getter]
    fn num_weights(&self) -> usize {
        self.model.num_weights()
    }

    /// Prune mask (`True` = pruned), if this network has been pruned.
    #[getter]
    fn mask(&self) -> Option<Vec<bool>> {
        self.mask.clone()
    }

    #[getter]
    fn density(&self) -> Option<f64> {
        let m = self.mask.as_ref()?;
        Some(1.0 - m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
    }

    fn weights(&self) -> Vec<f64> {
        self.model.current_flat()
    }

    fn original_weights(&self) -> Vec<f64> {
        self.model.original_flat()
    }

    fn __repr__(&self) -> String {
        format!("Mlp(dims={:?}, weights={})", self.model.dims(), self.model.num_weights())
    }
}

/// Pruning configuration. Keyword arguments use the same keys as config
/// files, e.g. `RunConfig(0.1, num_steps=100, block_size=256)`.
#[pyclass(name = "RunConfig", module = "icbs", from_py_object)]
#[derive(Clone)]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (density, **kwargs))]
    fn new(density: f64, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = RunConfig::garment(density);
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                cfg.set(&key, &v.str()?.to_string_lossy()).map_err(to_py)?;
            }
        }
        cfg.validate().map_err(to_py)?;
        Ok(Self(cfg))
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.0.set(key, &value.str()?.to_string_lossy()).map_err(to_py)?;
        self.0.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(density={})", self.0.density)
    }
}

/// One-shot pruning with `method` such as `"magnitude:per_layer"`.
#[pyfunction]
#[pyo3(signature = (model, train, method, density, seed = 0))]
fn prune_baseline(model: &PyMlp, train: &PyDataset, method: &str, density: f64, seed: u64) -> PyResult<PyMlp> {
    let spec: ScoringSpec = method.parse().map_err(PyValueError::new_err)?;
    let mut cfg = RunConfig::garment(density);
    cfg.seed = seed;
    cfg.validate().map_err(to_py)?;
    let mut pruned = model.model.clone();
    let state = baseline_from_config(&mut pruned, &train.0, spec, &cfg).map_err(to_py)?;
    Ok(PyMlp {
        model: pruned,
        seed: model.seed,
        mask: Some(state.mask().to_vec()),
    })
}

/// Iterative pruning. Returns the pruned network and one dict per epoch.
#[pyfunction]
fn prune_icbs<'py>(
    py: Python<'py>,
    model: &PyMlp,
    train: &PyDataset,
    valid: &PyDataset,
    config: &PyRunConfig,
) -> PyResult<(PyMlp, Vec<Bound<'py, PyDict>>)> {
    let res = py
        .detach(|| run_icbs(model.model.clone(), &train.0, &valid.0, &config.0, |_| {}))
        .map_err(to_py)?;
    let mut records = Vec::new();
    for r in &res.epochs {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("loss", r.loss)?;
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("skipped", r.skipped)?;
        records.push(d);
    }
    Ok((
        PyMlp {
            model: res.model,
            seed: model.seed,
            mask: Some(res.state.mask().to_vec()),
        },
        records,
    ))
}

/// Cardinality-constrained binary quadratic problem
/// `min linear·x + Σ_{i<j} q_ij x_i x_j` subject to `Σx = k`.
#[pyclass(name = "QcboProblem", module = "icbs", from_py_object)]
#[derive(Clone)]
struct PyQcbo(icbs_core::QcboProblem);

#[pymethods]
impl PyQcbo {
    #[new]
    #[pyo3(signature = (linear, k, quad = Vec::new()))]
    fn new(linear: Vec<f64>, k: usize, quad: Vec<(usize, usize, f64)>) -> PyResult<Self> {
        let n = linear.len();
        let mut q = Vec::with_capacity(quad.len());
        for (i, j, v) in quad {
            if i == j || i.max(j) >= n {
                return Err(PyValueError::new_err(format!("bad coupling ({i}, {j})")));
            }
            q.push((i.min(j), i.max(j), v));
        }
        q.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Ok(Self(icbs_core::QcboProblem {
            n,
            k,
            linear,
            quad: q,
            scale: 1.0,
        }))
    }

    #[staticmethod]
    fn from_dump(text: &str) -> PyResult<Self> {
        icbs_core::QcboProblem::from_dump(text).map(Self).map_err(to_py)
    }

    fn objective(&self, x: Vec<bool>) -> PyResult<f64> {
        if x.len() != self.0.n {
            return Err(PyValueError::new_err("assignment length differs from n"));
        }
        Ok(self.0.objective(&x))
    }

    #[pyo3(signature = (sweeps = 500, restarts = 10, seed = 0))]
    fn solve(&self, py: Python<'_>, sweeps: usize, restarts: usize, seed: u64) -> PyResult<(Vec<bool>, f64)> {
        let schedule = SaSchedule {
            sweeps,
            restarts,
            seed,
            ..SaSchedule::default()
        };
        let s = py.detach(|| solver::solve_csa(&self.0, &schedule)).map_err(to_py)?;
        Ok((s.x, s.objective))
    }

    fn brute_force(&self) -> PyResult<(Vec<bool>, f64)> {
        let s = solver::brute_force(&self.0).map_err(to_py)?;
        Ok((s.x, s.objective))
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }
}

/// `(1/m)·AᵀA` for an `m × n` matrix given as a list of rows.
#[pyfunction]
fn estimate_hessian(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err("need a non-empty rectangular matrix"));
    }
    let h = icbs_core::estimate_hessian(&icbs_core::Matrix::from_rows(&rows));
    Ok((0..h.rows()).map(|r| h.row(r).to_vec()).collect())
}

#[pymodule]
fn icbs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMlp>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyQcbo>()?;
    m.add_function(wrap_pyfunction!(prune_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(prune_icbs, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_hessian, m)?)?;
    Ok(())
}
