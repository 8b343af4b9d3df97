//! Python bindings for the pilab library.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pilab::methods::{self, MethodKind, MethodSettings, NoiseOverrides};
use pilab::pi::{self, PiKind};
use pilab::relabel::{self, Policy};
use pilab::report;
use pilab::train::TrainConfig;
use pilab::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::NanGradient { .. } | Error::NonFinite { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Benchmark instance built from a named preset.
#[pyclass(name = "Benchmark")]
struct PyBenchmark {
    inner: methods::Benchmark,
}

#[pymethods]
impl PyBenchmark {
    #[new]
    #[pyo3(signature = (preset, beta=None, policy=None, seed=None))]
    fn new(preset: &str, beta: Option<f64>, policy: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut spec = methods::preset(preset).map_err(to_py)?;
        if let Some(s) = seed {
            spec.data.seed = s;
        }
        let policy = policy.map(str::parse::<Policy>).transpose().map_err(to_py)?;
        let inner = methods::build_benchmark(&spec, NoiseOverrides { beta, policy }).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Loads a directory written by `write` or the CLI's `generate`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = methods::load_benchmark(path.as_ref()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.inner.pool.len()
    }

    #[getter]
    fn test_size(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn agreement(&self) -> f64 {
        self.inner.agreement()
    }

    #[getter]
    fn clean_labels(&self) -> Vec<usize> {
        self.inner.pool.y_clean.clone()
    }

    #[getter]
    fn noisy_labels(&self) -> Vec<usize> {
        self.inner.pool.y_noisy.clone()
    }

    fn write(&self, path: &str) -> PyResult<()> {
        methods::write_benchmark(&self.inner, path.as_ref()).map_err(to_py)
    }

    /// Trains `method` on each seed; returns the result as a JSON string.
    #[pyo3(signature = (method, pi=None, seeds=vec![0], epochs=None, lam=None))]
    fn run(
        &self,
        py: Python<'_>,
        method: &str,
        pi: Option<&str>,
        seeds: Vec<u64>,
        epochs: Option<usize>,
        lam: Option<f64>,
    ) -> PyResult<String> {
        let method: MethodKind = method.parse().map_err(to_py)?;
        let pi: Option<PiKind> = pi.map(str::parse).transpose().map_err(to_py)?;
        let mut cfg: TrainConfig = methods::desk_config();
        if let Some(e) = epochs {
            cfg = cfg.with_epochs(e);
        }
        if let Some(l) = lam {
            cfg.lambda = l;
        }
        let settings = MethodSettings::default();
        let bench = &self.inner;
        let result = py
            .allow_threads(|| methods::run_method(bench, method, pi, &cfg, &settings, &seeds))
            .map_err(to_py)?;
        serde_json::to_string(&result).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Benchmark(name={:?}, train={}, test={}, agreement={:.4})",
            self.inner.name,
            self.inner.pool.len(),
            self.inner.test.len(),
            self.inner.agreement()
        )
    }
}

/// `softmax(log(p) / T)`.
#[pyfunction]
fn temper_distribution(p: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    relabel::temper_distribution(&p, temperature).map_err(to_py)
}

/// Draws `n` relabeling temperatures at inverse scale `beta`.
#[pyfunction]
fn sample_temperatures(beta: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let mut r = pilab::rng::from_seed(seed);
    (0..n)
        .map(|_| relabel::sample_temperature(beta, &mut r))
        .collect::<Result<_, _>>()
        .map_err(to_py)
}

/// `softmax(logits / tau)` row by row.
#[pyfunction]
fn distill_targets(logits: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let t = pilab::models::distill_targets(&tensor(logits)?, tau).map_err(to_py)?;
    Ok(rows(&t))
}

/// Synthetic PI rows of the given kind.
#[pyfunction]
#[pyo3(signature = (kind, clean, noisy, classes, width=8, seed=0))]
fn pi_features(
    kind: &str,
    clean: Vec<usize>,
    noisy: Vec<usize>,
    classes: usize,
    width: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let kind: PiKind = kind.parse().map_err(to_py)?;
    let m = match kind {
        PiKind::Indicator => pi::indicator_pi(&clean, &noisy),
        PiKind::Labels => pi::labels_pi(&noisy, classes),
        PiKind::NearOptimal => pi::near_optimal_pi(&clean, &noisy, classes),
        PiKind::RandomId => pi::random_id_pi(clean.len(), width, seed),
        other => Err(Error::invalid("kind", format!("{other} needs annotator records"))),
    }
    .map_err(to_py)?;
    Ok(rows(&m.values))
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    report::auroc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn welch_p_value(a: Vec<f64>, b: Vec<f64>) -> f64 {
    report::welch_p_value(&a, &b)
}

/// Aggregates `[(group, method, pi, accuracies)]` into table cells as JSON.
#[pyfunction]
fn aggregate(cells: Vec<(String, String, String, Vec<f64>)>) -> PyResult<String> {
    let inputs: Vec<report::CellInput> = cells
        .into_iter()
        .map(|(group, method, pi, accuracies)| report::CellInput {
            group,
            method,
            pi,
            accuracies,
        })
        .collect();
    let table = report::aggregate(&inputs).map_err(to_py)?;
    serde_json::to_string(&table).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    methods::PRESETS.to_vec()
}

#[pymodule]
fn pilab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBenchmark>()?;
    m.add_function(wrap_pyfunction!(temper_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(sample_temperatures, m)?)?;
    m.add_function(wrap_pyfunction!(distill_targets, m)?)?;
    m.add_function(wrap_pyfunction!(pi_features, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(welch_p_value, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
