//! Python bindings for `flowdecomp`.

use flowdecomp::atlas::FlowAtlas;
use flowdecomp::cli::{bundled, load_config, parse_override, BUNDLED};
use flowdecomp::decompose::{self, DecomposeError, StopReason};
use flowdecomp::distributions::CATALOG;
use flowdecomp::verify;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: DecomposeError) -> PyErr {
    match e {
        DecomposeError::Scenario(_) | DecomposeError::Distribution(_) | DecomposeError::Noise(_) => value_err(e),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A diffeomorphism sampled on a grid.
#[pyclass(name = "FlowAtlas", module = "flowdecomp_py", frozen)]
#[derive(Clone)]
struct PyFlowAtlas {
    inner: FlowAtlas,
}

#[pymethods]
impl PyFlowAtlas {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn seeds(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len()).map(|a| self.inner.seed(a).iter().copied().collect()).collect()
    }

    fn images(&self) -> Vec<Vec<f64>> {
        self.inner.images().iter().map(|y| y.iter().copied().collect()).collect()
    }

    fn jacobian(&self, node: usize) -> PyResult<Vec<Vec<f64>>> {
        if node >= self.inner.len() {
            return Err(value_err(format!("node {node} out of range")));
        }
        Ok(rows(self.inner.jacobian(node)))
    }

    fn valid(&self) -> Vec<bool> {
        self.inner.valid_flags().to_vec()
    }

    /// Multilinear interpolation of the map at `x`.
    fn evaluate(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.evaluate(&x).map_err(value_err)?.iter().copied().collect())
    }

    /// Preimage of `y` by Newton iteration.
    fn invert(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.invert(&y).map_err(value_err)?.iter().copied().collect())
    }

    /// Least-squares affine fit `(matrix, offset)` over valid nodes.
    fn affine_fit(&self) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
        self.inner
            .affine_fit()
            .map(|(m, b)| (rows(&m), b.iter().copied().collect()))
    }

    fn __repr__(&self) -> String {
        format!(
            "FlowAtlas(dim={}, nodes={}, valid={}, t={})",
            self.inner.dim(),
            self.inner.len(),
            self.inner.valid_count(),
            self.inner.time()
        )
    }
}

fn wrap(a: &FlowAtlas) -> PyFlowAtlas {
    PyFlowAtlas { inner: a.clone() }
}

fn stop_name(s: &Option<StopReason>) -> Option<&'static str> {
    s.as_ref().map(|r| match r {
        StopReason::TransversalityLost { .. } => "transversality_lost",
        StopReason::Explosion { .. } => "explosion",
        StopReason::LeftRegion => "left_region",
        StopReason::EvalError { .. } => "eval_error",
        StopReason::RankDeficientStencil => "rank_deficient_stencil",
    })
}

/// Outcome of a pairwise decomposition.
#[pyclass(name = "PairResult", module = "flowdecomp_py", frozen)]
struct PyPairResult {
    #[pyo3(get)]
    phi: PyFlowAtlas,
    #[pyo3(get)]
    xi: PyFlowAtlas,
    #[pyo3(get)]
    psi: PyFlowAtlas,
    #[pyo3(get)]
    tau: Vec<usize>,
    #[pyo3(get)]
    stops: Vec<Option<&'static str>>,
    #[pyo3(get)]
    horizon: usize,
    #[pyo3(get)]
    h: f64,
    #[pyo3(get)]
    gap_history: Vec<f64>,
    #[pyo3(get)]
    composition_residual: f64,
    #[pyo3(get)]
    verticality_residual: f64,
    #[pyo3(get)]
    tangency_residual: f64,
    fits: Vec<(f64, Vec<Vec<f64>>, Vec<f64>)>,
}

#[pymethods]
impl PyPairResult {
    /// `(t, matrix, offset)` affine fits of the horizontal factor per step.
    fn xi_fits(&self) -> Vec<(f64, Vec<Vec<f64>>, Vec<f64>)> {
        self.fits.clone()
    }

    fn tau_min(&self) -> usize {
        self.tau.iter().copied().min().unwrap_or(0)
    }
}

/// Outcome of a cascade over a flag sequence.
#[pyclass(name = "CascadeResult", module = "flowdecomp_py", frozen)]
struct PyCascadeResult {
    #[pyo3(get)]
    phi: PyFlowAtlas,
    #[pyo3(get)]
    factors: Vec<PyFlowAtlas>,
    #[pyo3(get)]
    remainder: PyFlowAtlas,
    #[pyo3(get)]
    tau: Vec<usize>,
    #[pyo3(get)]
    stage_tau_min: Vec<usize>,
}

/// A validated scenario.
#[pyclass(name = "Scenario", module = "flowdecomp_py", frozen)]
struct PyScenario {
    inner: decompose::Scenario,
    mode: String,
}

#[pymethods]
impl PyScenario {
    /// Parses a scenario config; `overrides` are `KEY=VALUE` strings.
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_config(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        let ov = overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?;
        let cfg = load_config(text, &ov).map_err(value_err)?;
        Ok(Self {
            inner: cfg.scenario,
            mode: cfg.mode.name().to_string(),
        })
    }

    /// Loads one of the bundled scenarios.
    #[staticmethod]
    #[pyo3(signature = (name, overrides = Vec::new()))]
    fn bundled(name: &str, overrides: Vec<String>) -> PyResult<Self> {
        let text = bundled(name).ok_or_else(|| value_err(format!("no bundled scenario `{name}`")))?;
        Self::from_config(text, overrides)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn mode(&self) -> &str {
        &self.mode
    }

    fn full_flow(&self, py: Python<'_>) -> PyResult<PyFlowAtlas> {
        let sc = &self.inner;
        py.allow_threads(|| {
            let path = sc.noise_path()?;
            decompose::run_full_flow(sc, &path)
        })
        .map(|a| wrap(&a))
        .map_err(run_err)
    }

    fn fastpath(&self, py: Python<'_>) -> PyResult<PyFlowAtlas> {
        let sc = &self.inner;
        py.allow_threads(|| {
            let path = sc.noise_path()?;
            decompose::run_fastpath(sc, &path)
        })
        .map(|a| wrap(&a))
        .map_err(run_err)
    }

    fn decompose(&self, py: Python<'_>) -> PyResult<PyPairResult> {
        let sc = &self.inner;
        let r = py
            .allow_threads(|| {
                let path = sc.noise_path()?;
                decompose::run_pair_decomposition(sc, &path)
            })
            .map_err(run_err)?;
        Ok(PyPairResult {
            phi: wrap(&r.phi),
            xi: wrap(&r.xi),
            psi: wrap(&r.psi),
            stops: r.stops.iter().map(stop_name).collect(),
            tau: r.tau.clone(),
            horizon: r.horizon,
            h: r.h,
            gap_history: r.gap_history.clone(),
            composition_residual: r.composition.max_abs,
            verticality_residual: r.verticality.max_abs,
            tangency_residual: r.tangency.max_abs,
            fits: r
                .xi_fits
                .iter()
                .map(|f| (f.t, rows(&f.matrix), f.offset.iter().copied().collect()))
                .collect(),
        })
    }

    fn cascade(&self, py: Python<'_>) -> PyResult<PyCascadeResult> {
        let sc = &self.inner;
        let r = py
            .allow_threads(|| {
                let path = sc.noise_path()?;
                decompose::run_cascade(sc, &path)
            })
            .map_err(run_err)?;
        Ok(PyCascadeResult {
            phi: wrap(&r.phi),
            factors: r.factors.iter().map(wrap).collect(),
            remainder: wrap(&r.remainder),
            stage_tau_min: r.stage_tau_min.clone(),
            tau: r.tau,
        })
    }

    /// Coordinate-wise factors of the full flow and the trailing-minor minima.
    fn factorize(&self, py: Python<'_>) -> PyResult<(Vec<PyFlowAtlas>, Vec<f64>)> {
        let sc = &self.inner;
        let f = py
            .allow_threads(|| {
                let path = sc.noise_path()?;
                let phi = decompose::run_full_flow(sc, &path)?;
                decompose::coordinate_factorize(&phi, &sc.base_point(), sc.thresholds.minor)
            })
            .map_err(run_err)?;
        Ok((f.factors.iter().map(wrap).collect(), f.minors_min))
    }
}

/// Composes atlases left to right as maps, `factors[0] o factors[1] o ...`,
/// on the seeds of `on`.
#[pyfunction]
fn telescope(factors: Vec<PyFlowAtlas>, on: &PyFlowAtlas) -> PyFlowAtlas {
    let inner: Vec<FlowAtlas> = factors.into_iter().map(|f| f.inner).collect();
    wrap(&decompose::telescope(&inner, on.inner.grid()))
}

/// Row factors `M_1 .. M_n` of a matrix with non-vanishing trailing minors.
#[pyfunction]
fn row_factors(matrix: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(value_err("matrix must be square"));
    }
    let m = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
    Ok(verify::gauss_row_factor_oracle(&m)
        .map_err(value_err)?
        .iter()
        .map(rows)
        .collect())
}

/// `-tan t` below the blow-up time.
#[pyfunction]
fn riccati_reference(t: f64) -> PyResult<f64> {
    verify::riccati_reference(t).map_err(value_err)
}

/// `(name, provenance, summary)` of every catalog distribution.
#[pyfunction]
fn catalog() -> Vec<(&'static str, &'static str, &'static str)> {
    CATALOG.iter().map(|c| (c.name, c.provenance, c.summary)).collect()
}

#[pyfunction]
fn bundled_scenarios() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

#[pymodule]
fn flowdecomp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlowAtlas>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyPairResult>()?;
    m.add_class::<PyCascadeResult>()?;
    m.add_function(wrap_pyfunction!(telescope, m)?)?;
    m.add_function(wrap_pyfunction!(row_factors, m)?)?;
    m.add_function(wrap_pyfunction!(riccati_reference, m)?)?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_scenarios, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
