//! Python bindings. Arrays cross the boundary as nested lists.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use ndarray::Array2;

use trialemu::cohort::{prepare_outcome, read_cohort, Outcome, OutcomeData};
use trialemu::evaluation::{run_protocol, AgreementReport, BootstrapPlan};
use trialemu::ingest::{parse_events, sessions_for_log, EventSchema, SessionCounts, SpawnRules};
use trialemu::synthetic::{epsilon_ate, generate, true_ate, DgpKind, DgpSpec, SyntheticTable};
use trialemu::{Error, ModelConfig, ModelTag};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows of x have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Covariates, binary treatment and outcome.
#[pyclass(name = "Dataset", module = "trialemu_py", frozen)]
pub struct PyDataset {
    inner: trialemu::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(x: Vec<Vec<f64>>, t: Vec<u8>, y: Vec<f64>) -> PyResult<Self> {
        let inner = trialemu::Dataset::new(matrix(x)?, t, y).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.x)
    }

    #[getter]
    fn t(&self) -> Vec<u8> {
        self.inner.t.clone()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    fn treated_fraction(&self) -> f64 {
        self.inner.treated_fraction()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, d={}, treated={})", self.inner.n(), self.inner.d(), self.inner.n_treated())
    }
}

/// Simulated table with both potential outcomes.
#[pyclass(name = "SyntheticTable", module = "trialemu_py", frozen)]
pub struct PySyntheticTable {
    inner: SyntheticTable,
}

#[pymethods]
impl PySyntheticTable {
    fn __len__(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn y1(&self) -> Vec<f64> {
        self.inner.y1.clone()
    }

    #[getter]
    fn y0(&self) -> Vec<f64> {
        self.inner.y0.clone()
    }

    #[getter]
    fn e_true(&self) -> Vec<f64> {
        self.inner.e_true.clone()
    }

    fn true_ate(&self) -> f64 {
        true_ate(&self.inner)
    }

    /// Signed error of an ATE estimate against this table's true ATE.
    fn epsilon_ate(&self, estimate: f64) -> f64 {
        epsilon_ate(estimate, &self.inner)
    }

    fn to_dataset(&self) -> PyDataset {
        PyDataset { inner: self.inner.to_dataset() }
    }

    /// Writes the cohort export with `y1`, `y0` and `e_true` columns.
    fn write(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.inner.write(std::io::BufWriter::new(f)).map_err(py_err)
    }
}

/// Imputed train, validation and test splits for one outcome.
#[pyclass(name = "Splits", module = "trialemu_py", frozen)]
pub struct PySplits {
    inner: OutcomeData,
}

#[pymethods]
impl PySplits {
    #[getter]
    fn train(&self) -> PyDataset {
        PyDataset { inner: self.inner.train.clone() }
    }

    #[getter]
    fn validation(&self) -> PyDataset {
        PyDataset { inner: self.inner.validation.clone() }
    }

    #[getter]
    fn test(&self) -> PyDataset {
        PyDataset { inner: self.inner.test.clone() }
    }
}

/// Bootstrap estimates for a set of models.
#[pyclass(name = "AgreementReport", module = "trialemu_py", frozen)]
pub struct PyAgreementReport {
    inner: AgreementReport,
}

#[pymethods]
impl PyAgreementReport {
    /// `[(model, ate_mean, ate_lo, ate_hi, rmse_mean, rmse_lo, rmse_hi)]`.
    fn rows(&self) -> Vec<(String, f64, f64, f64, f64, f64, f64)> {
        self.inner
            .models
            .iter()
            .map(|m| (m.tag.tag().to_string(), m.ate.mean, m.ate.lo, m.ate.hi, m.rmse.mean, m.rmse.lo, m.rmse.hi))
            .collect()
    }

    fn ate_samples(&self, model: &str) -> PyResult<Vec<f64>> {
        let tag: ModelTag = model.parse().map_err(py_err)?;
        self.inner
            .models
            .iter()
            .find(|m| m.tag == tag)
            .map(|m| m.ate_samples.clone())
            .ok_or_else(|| PyValueError::new_err(format!("model {model} was not evaluated")))
    }

    fn resample_sizes(&self) -> Vec<usize> {
        self.inner.resample_sizes.clone()
    }

    fn summary(&self) -> String {
        self.inner.summary(None)
    }

    fn render(&self) -> String {
        self.inner.render()
    }
}

fn parse_tags(models: Option<Vec<String>>) -> PyResult<Vec<ModelTag>> {
    match models {
        None => Ok(ModelTag::ALL.to_vec()),
        Some(list) => list.iter().map(|m| m.parse().map_err(py_err)).collect(),
    }
}

#[pymodule]
mod trialemu_py {
    use super::*;

    #[pymodule_export]
    use super::{PyAgreementReport, PyDataset, PySplits, PySyntheticTable};

    /// Valid model tags.
    #[pyfunction]
    fn model_tags() -> Vec<&'static str> {
        ModelTag::ALL.iter().map(|m| m.tag()).collect()
    }

    /// Session counts `(original supine, artificial supine, prone)` of an events file.
    #[pyfunction]
    fn session_counts(path: &str) -> PyResult<(usize, usize, usize)> {
        let f = std::fs::File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let log = parse_events(f, &EventSchema::default()).map_err(py_err)?;
        let c = SessionCounts::of(&sessions_for_log(&log, &SpawnRules::default()));
        Ok((c.supine_original, c.supine_artificial, c.prone))
    }

    /// Draws a synthetic table; `kind` is linear_confounded, nonlinear or null_effect.
    #[pyfunction]
    #[pyo3(signature = (kind = "linear_confounded", n = 2000, d = 10, tau = 10.0, gamma = 1.0, sigma = 1.0, seed = 0))]
    fn simulate(kind: &str, n: usize, d: usize, tau: f64, gamma: f64, sigma: f64, seed: u64) -> PyResult<PySyntheticTable> {
        let kind: DgpKind = kind.parse().map_err(py_err)?;
        let spec = DgpSpec { kind, n, d, tau, gamma, sigma, ..DgpSpec::default() };
        Ok(PySyntheticTable { inner: generate(&spec, seed).map_err(py_err)? })
    }

    /// Reads a cohort file and splits rows with the chosen outcome.
    #[pyfunction]
    #[pyo3(signature = (path, outcome = "early", seed = 0, test_fraction = 0.2, validation_fraction = 0.3))]
    fn load_splits(path: &str, outcome: &str, seed: u64, test_fraction: f64, validation_fraction: f64) -> PyResult<PySplits> {
        let f = std::fs::File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let cohort = read_cohort(f).map_err(py_err)?;
        let which: Outcome = outcome.parse().map_err(py_err)?;
        let inner = prepare_outcome(&cohort, which, seed, test_fraction, validation_fraction).map_err(py_err)?;
        Ok(PySplits { inner })
    }

    /// Fits one model with default settings and returns `(ate, test predictions)`.
    #[pyfunction]
    #[pyo3(signature = (model, train, validation, test, seed = 0))]
    fn fit_and_evaluate(
        py: Python<'_>,
        model: &str,
        train: &PyDataset,
        validation: &PyDataset,
        test: &PyDataset,
        seed: u64,
    ) -> PyResult<(f64, Vec<f64>)> {
        let tag: ModelTag = model.parse().map_err(py_err)?;
        let (tr, va, te) = (&train.inner, &validation.inner, &test.inner);
        let fit = py
            .detach(|| trialemu::estimator::fit_and_evaluate(tag, &ModelConfig::default(), tr, va, te, seed))
            .map_err(py_err)?;
        Ok((fit.ate, fit.test_predictions))
    }

    /// Bootstrap protocol over `models` (all six when omitted).
    #[pyfunction]
    #[pyo3(signature = (splits, models = None, replicates = 100, frac = 0.95, seed = 0))]
    fn evaluate(
        py: Python<'_>,
        splits: &PySplits,
        models: Option<Vec<String>>,
        replicates: usize,
        frac: f64,
        seed: u64,
    ) -> PyResult<PyAgreementReport> {
        let tags = parse_tags(models)?;
        let plan = BootstrapPlan { replicates, frac, seed };
        let data = &splits.inner;
        let inner = py.detach(|| run_protocol(data, None, &tags, &ModelConfig::default(), &plan)).map_err(py_err)?;
        Ok(PyAgreementReport { inner })
    }

    /// Entropic transport distance between two point sets.
    #[pyfunction]
    fn wasserstein_approx(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
        let (a, b) = (matrix(a)?, matrix(b)?);
        trialemu::cfrnet::wasserstein_approx(a.view(), b.view(), &Default::default()).map_err(py_err)
    }

    /// Exact transport distance; small sets only.
    #[pyfunction]
    fn wasserstein_exact(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
        let (a, b) = (matrix(a)?, matrix(b)?);
        trialemu::cfrnet::wasserstein_exact(a.view(), b.view()).map_err(py_err)
    }
}
