//! Python bindings: tensors, simulation, fits and deflation.
//!
//! Arrays cross the boundary as flat column-major lists plus dims, which
//! matches `numpy.ravel(order="F")`.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tgcca::deflation::{cosine_alignment, extract_components};
use tgcca::model::{BlockSet, DesignMatrix, OrthMode, Regime, Scheme, SolverOptions};
use tgcca::pipeline::{prepare, PreparedProblem, Regularization};
use tgcca::simgen::{sample_dataset, SimSpec};
use tgcca::solver::multi_start_fit;
use tgcca::tensor::{CpVector, DenseTensor};

fn to_py(e: tgcca::Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} '{s}'")))
}

/// Dense tensor stored column-major (first index fastest).
#[pyclass(name = "Tensor", module = "tgcca_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: DenseTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(dims: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: DenseTensor::new(dims, data).map_err(to_py)?,
        })
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, index: Vec<usize>) -> PyResult<f64> {
        if index.len() != self.inner.order() || index.iter().zip(self.inner.dims()).any(|(i, d)| i >= d) {
            return Err(PyValueError::new_err(format!("index {index:?} out of range")));
        }
        Ok(self.inner.get(&index))
    }

    fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: tgcca::io::read_tensor(path).map_err(to_py)?,
        })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        tgcca::io::write_tensor(path, &self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?})", self.inner.dims())
    }
}

/// Rank-R CP vector `[[weights; W_1, ..., W_d]]`.
#[pyclass(name = "CpVector", module = "tgcca_py", from_py_object)]
#[derive(Clone)]
pub struct PyCpVector {
    inner: CpVector,
}

#[pymethods]
impl PyCpVector {
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.as_slice().to_vec()
    }

    /// Factor matrices as row lists, `factors[m][i][r]`.
    #[getter]
    fn factors(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner
            .factors
            .iter()
            .map(|f| f.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    /// Column-major vectorization of the full tensor.
    fn reconstruct(&self) -> Vec<f64> {
        self.inner.reconstruct().as_slice().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("CpVector(dims={:?}, rank={})", self.inner.dims(), self.inner.rank())
    }
}

fn wrap_cps(cps: Vec<CpVector>) -> Vec<PyCpVector> {
    cps.into_iter().map(|inner| PyCpVector { inner }).collect()
}

#[pyclass(name = "FitResult", module = "tgcca_py", get_all)]
pub struct PyFitResult {
    /// Canonical vectors in the preprocessed (unwhitened) variables.
    vectors: Vec<PyCpVector>,
    components: Vec<Vec<f64>>,
    trace: Vec<f64>,
    criterion: f64,
    iterations: usize,
    converged: bool,
    best_start: usize,
    warnings: Vec<String>,
}

#[pymethods]
impl PyFitResult {
    fn __repr__(&self) -> String {
        format!(
            "FitResult(criterion={:.6}, iterations={}, converged={})",
            self.criterion, self.iterations, self.converged
        )
    }
}

struct Setup {
    prepared: PreparedProblem,
    options: SolverOptions,
}

#[allow(clippy::too_many_arguments)]
fn setup(
    blocks: Vec<PyTensor>,
    ranks: Option<Vec<usize>>,
    regime: &str,
    scheme: &str,
    regularization: &str,
    orth_mode: &str,
    tau: Vec<f64>,
    design: Option<Vec<Vec<f64>>>,
    n_starts: usize,
    seed: u64,
    max_iter: usize,
    eps_stop: f64,
    tandem: bool,
) -> PyResult<Setup> {
    let bs = BlockSet::new(blocks.into_iter().map(|t| t.inner).collect()).map_err(to_py)?;
    let l = bs.num_blocks();
    let design = match design {
        None => DesignMatrix::complete(l),
        Some(rows) => {
            if rows.len() != l || rows.iter().any(|r| r.len() != l) {
                return Err(PyValueError::new_err(format!("design must be {l}x{l}")));
            }
            DesignMatrix::new(DMatrix::from_fn(l, l, |i, j| rows[i][j]))
        }
    }
    .map_err(to_py)?;
    let options = SolverOptions {
        eps_stop,
        max_iter,
        n_starts,
        seed,
        orth_mode: parse_enum::<OrthMode>("orth_mode", orth_mode)?,
        ranks: ranks.unwrap_or_default(),
        regime: parse_enum::<Regime>("regime", regime)?,
        tau,
        tandem,
        record_updates: false,
    };
    let scheme: Scheme = parse_enum("scheme", scheme)?;
    let regularization: Regularization = parse_enum("regularization", regularization)?;
    let prepared = prepare(&bs, design, scheme, &options, regularization).map_err(to_py)?;
    Ok(Setup { prepared, options })
}

/// Preprocess, regularize and fit with multiple random starts.
#[pyfunction]
#[pyo3(signature = (
    blocks, ranks=None, regime="separable", scheme="identity", regularization="estimated",
    orth_mode="first", tau=vec![1e-3], design=None, n_starts=1, seed=0, max_iter=1000,
    eps_stop=1e-10, tandem=true
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    blocks: Vec<PyTensor>,
    ranks: Option<Vec<usize>>,
    regime: &str,
    scheme: &str,
    regularization: &str,
    orth_mode: &str,
    tau: Vec<f64>,
    design: Option<Vec<Vec<f64>>>,
    n_starts: usize,
    seed: u64,
    max_iter: usize,
    eps_stop: f64,
    tandem: bool,
) -> PyResult<PyFitResult> {
    let s = setup(
        blocks, ranks, regime, scheme, regularization, orth_mode, tau, design, n_starts, seed, max_iter, eps_stop,
        tandem,
    )?;
    let ms = py
        .detach(|| multi_start_fit(&s.prepared.problem, &s.options))
        .map_err(to_py)?;
    let best = ms.best;
    let vectors = s.prepared.original_vectors(&best.vectors).map_err(to_py)?;
    Ok(PyFitResult {
        vectors: wrap_cps(vectors),
        components: best.components.iter().map(|c| c.as_slice().to_vec()).collect(),
        criterion: best.criterion(),
        trace: best.trace,
        iterations: best.iterations,
        converged: best.converged,
        best_start: ms.best_start,
        warnings: best.warnings.iter().map(|w| format!("{w:?}")).collect(),
    })
}

/// Deflation: one list of per-block vectors per stage, `None` once the
/// signal is exhausted.
#[pyfunction]
#[pyo3(signature = (
    blocks, components, ranks=None, regime="separable", scheme="identity", regularization="estimated",
    orth_mode="first", tau=vec![1e-3], design=None, n_starts=1, seed=0, max_iter=1000,
    eps_stop=1e-10, tandem=true
))]
#[allow(clippy::too_many_arguments)]
fn extract(
    py: Python<'_>,
    blocks: Vec<PyTensor>,
    components: usize,
    ranks: Option<Vec<usize>>,
    regime: &str,
    scheme: &str,
    regularization: &str,
    orth_mode: &str,
    tau: Vec<f64>,
    design: Option<Vec<Vec<f64>>>,
    n_starts: usize,
    seed: u64,
    max_iter: usize,
    eps_stop: f64,
    tandem: bool,
) -> PyResult<Vec<Option<Vec<PyCpVector>>>> {
    let s = setup(
        blocks, ranks, regime, scheme, regularization, orth_mode, tau, design, n_starts, seed, max_iter, eps_stop,
        tandem,
    )?;
    let stack = py
        .detach(|| extract_components(&s.prepared, &s.options, components))
        .map_err(to_py)?;
    Ok(stack
        .stages
        .into_iter()
        .map(|st| st.map(|st| wrap_cps(st.vectors)))
        .collect())
}

#[pyclass(name = "Simulation", module = "tgcca_py", get_all)]
pub struct PySimulation {
    truths: Vec<PyCpVector>,
    /// `folds[f][l]`.
    folds: Vec<Vec<PyTensor>>,
}

/// Draws every fold of a simulation spec given as JSON.
#[pyfunction]
fn simulate(py: Python<'_>, spec_json: &str) -> PyResult<PySimulation> {
    let spec: SimSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (model, folds) = py.detach(|| sample_dataset(&spec)).map_err(to_py)?;
    Ok(PySimulation {
        truths: wrap_cps(model.truths),
        folds: folds
            .into_iter()
            .map(|bs| bs.into_blocks().into_iter().map(|inner| PyTensor { inner }).collect())
            .collect(),
    })
}

/// `|<a, b>| / (‖a‖ ‖b‖)`.
#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    cosine_alignment(&DVector::from_vec(a), &DVector::from_vec(b)).map_err(to_py)
}

#[pymodule]
fn tgcca_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyCpVector>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    Ok(())
}
