//! Python bindings: run configuration, the command-level operations and a
//! standalone series activation.

use std::path::PathBuf;

use lslu::analysis;
use lslu::commands::{self, BenchTargets, DataOverride, ABLATION_TERMS};
use lslu::config::{DatasetKind, RunConfig};
use lslu::nn::BaseActivation;
use lslu::series::{SeriesActivationParams, SeriesParamKind};
use lslu::{Error, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(lslu, LsluError, PyRuntimeError, "Error raised by the lslu core.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::FileMissing(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::InvalidConfig(_) | Error::InvalidDepth(_) | Error::InvalidRate(_) | Error::UnknownLayer(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => LsluError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Run configuration. Keyword arguments override the defaults; unknown keys
/// raise `ValueError`.
#[pyclass(name = "RunConfig", module = "lslu", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

/// Serialises keyword arguments with Python's `json` module and merges them
/// over `base`.
fn merge(py: Python<'_>, base: &RunConfig, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let Some(kwargs) = kwargs else {
        return Ok(base.clone());
    };
    let text: String = py.import("json")?.call_method1("dumps", (kwargs,))?.extract()?;
    let overrides: serde_json::Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut value = serde_json::to_value(base).map_err(|e| LsluError::new_err(e.to_string()))?;
    if let (Some(dst), Some(src)) = (value.as_object_mut(), overrides.as_object()) {
        for (k, v) in src {
            dst.insert(k.clone(), v.clone());
        }
    }
    RunConfig::from_json(&value.to_string()).map_err(to_py)
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: merge(py, &RunConfig::default(), kwargs)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_json(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    /// Copy with the given keys replaced.
    #[pyo3(signature = (**kwargs))]
    fn replace(&self, py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: merge(py, &self.inner, kwargs)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// `S(x) = Σ θₙ·αₙ·f(x + bₙ) + ωₙ` in f64, initialised to equal the base.
#[pyclass(name = "SeriesActivation", module = "lslu")]
struct PySeries {
    inner: SeriesActivationParams<f64>,
}

impl PySeries {
    fn set(&mut self, kind: SeriesParamKind, values: Vec<f64>) -> PyResult<()> {
        let terms = self.inner.terms();
        if values.len() != terms {
            return Err(PyValueError::new_err(format!(
                "{} needs {terms} values, got {}",
                kind.as_str(),
                values.len()
            )));
        }
        self.inner.get_mut(kind).value = Tensor::new([terms], values).map_err(to_py)?;
        Ok(())
    }

    fn get(&self, kind: SeriesParamKind) -> Vec<f64> {
        self.inner.get(kind).value.data().to_vec()
    }
}

#[pymethods]
impl PySeries {
    #[new]
    #[pyo3(signature = (terms, base = "relu"))]
    fn new(terms: usize, base: &str) -> PyResult<Self> {
        Ok(PySeries {
            inner: SeriesActivationParams::init(terms, parse(base)?),
        })
    }

    #[getter]
    fn terms(&self) -> usize {
        self.inner.terms()
    }

    #[getter]
    fn base(&self) -> String {
        self.inner.base.to_string()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.get(SeriesParamKind::Theta)
    }

    #[setter]
    fn set_theta(&mut self, v: Vec<f64>) -> PyResult<()> {
        self.set(SeriesParamKind::Theta, v)
    }

    #[getter]
    fn omega(&self) -> Vec<f64> {
        self.get(SeriesParamKind::Omega)
    }

    #[setter]
    fn set_omega(&mut self, v: Vec<f64>) -> PyResult<()> {
        self.set(SeriesParamKind::Omega, v)
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.get(SeriesParamKind::Alpha)
    }

    #[setter]
    fn set_alpha(&mut self, v: Vec<f64>) -> PyResult<()> {
        self.set(SeriesParamKind::Alpha, v)
    }

    #[getter]
    fn shift(&self) -> Vec<f64> {
        self.get(SeriesParamKind::Shift)
    }

    #[setter]
    fn set_shift(&mut self, v: Vec<f64>) -> PyResult<()> {
        self.set(SeriesParamKind::Shift, v)
    }

    fn __call__(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let n = x.len();
        let y = self.inner.eval(&Tensor::new([n], x).map_err(to_py)?).map_err(to_py)?;
        Ok(y.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "SeriesActivation(terms={}, base={:?})",
            self.inner.terms(),
            self.inner.base.to_string()
        )
    }
}

/// The base activation applied elementwise.
#[pyfunction]
fn base_activation(name: &str, x: Vec<f64>) -> PyResult<Vec<f64>> {
    let base: BaseActivation = parse(name)?;
    Ok(x.into_iter().map(|v| base.eval(v)).collect())
}

/// Class selectivity index of one unit from its per-class mean activations.
#[pyfunction]
fn selectivity_index(class_means: Vec<f64>) -> PyResult<f64> {
    analysis::selectivity_index(&class_means).map_err(to_py)
}

#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let s = py.detach(move || commands::cmd_train(&cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("out_dir", s.out_dir)?;
    d.set_item("epochs_run", s.epochs_run)?;
    d.set_item("final_val_acc", s.final_val_acc)?;
    d.set_item("stopped_early", s.stopped_early)?;
    d.set_item("params", s.params)?;
    Ok(d)
}

fn data_override(dataset: Option<&str>, data_dir: Option<PathBuf>, limit: Option<usize>) -> PyResult<DataOverride> {
    Ok(DataOverride {
        dataset: dataset.map(parse::<DatasetKind>).transpose()?,
        data_dir,
        limit,
    })
}

#[pyfunction]
#[pyo3(signature = (checkpoint, dataset = None, data_dir = None, limit = None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    dataset: Option<&str>,
    data_dir: Option<PathBuf>,
    limit: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let data = data_override(dataset, data_dir, limit)?;
    let r = py
        .detach(move || commands::cmd_eval(&checkpoint, &data))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("top1", r.top1)?;
    d.set_item("per_class", r.per_class)?;
    d.set_item("class_counts", r.class_counts)?;
    d.set_item("loss", r.loss)?;
    d.set_item("samples", r.samples)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (input, output, probes = 100))]
fn fuse<'py>(py: Python<'py>, input: PathBuf, output: PathBuf, probes: usize) -> PyResult<Bound<'py, PyDict>> {
    let s = py
        .detach(move || commands::cmd_fuse(&input, &output, probes))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("passed", s.passed())?;
    d.set_item("max_abs_diff", s.report.max_abs_diff)?;
    d.set_item("tolerance", s.tolerance)?;
    d.set_item("argmax_agree", s.report.argmax_agree)?;
    d.set_item("probes", s.report.probes)?;
    let layers: Vec<(String, f64)> = s.report.layers.into_iter().map(|l| (l.layer, l.max_abs_diff)).collect();
    d.set_item("layers", layers)?;
    let not_foldable: Vec<(String, String)> = s
        .not_foldable
        .into_iter()
        .map(|n| (n.layer, n.reason.to_string()))
        .collect();
    d.set_item("not_foldable", not_foldable)?;
    d.set_item("params_before", s.params_before)?;
    d.set_item("params_after", s.params_after)?;
    Ok(d)
}

/// One dict per parameter group.
#[pyfunction]
#[pyo3(signature = (config, samples = 2))]
fn gradcheck<'py>(py: Python<'py>, config: &PyRunConfig, samples: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    let r = py
        .detach(move || commands::cmd_gradcheck(&cfg, samples))
        .map_err(to_py)?;
    r.groups
        .iter()
        .map(|g| {
            let d = PyDict::new(py);
            d.set_item("group", format!("{:?}", g.role))?;
            d.set_item("tensors", g.tensors)?;
            d.set_item("checked", g.checked)?;
            d.set_item("skipped", g.skipped)?;
            d.set_item("max_rel_err", g.max_rel_err)?;
            d.set_item("pass", g.pass)?;
            Ok(d)
        })
        .collect()
}

/// One dict per term count 0..=4; also writes `ablation.csv`.
#[pyfunction]
fn ablate<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    let rows = py
        .detach(move || commands::cmd_ablate(&cfg, &ABLATION_TERMS))
        .map_err(to_py)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("n", r.n)?;
            d.set_item("params", r.params)?;
            d.set_item("flops", r.flops)?;
            d.set_item("acc", r.acc)?;
            d.set_item("latency_ms", r.latency_ms)?;
            Ok(d)
        })
        .collect()
}

/// `{label: (mean_ms, std_ms)}` for the requested graphs.
#[pyfunction]
#[pyo3(name = "bench", signature = (checkpoint, fused = true, unfused = true, iters = 100, warmup = 10))]
fn bench_latency<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    fused: bool,
    unfused: bool,
    iters: usize,
    warmup: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let targets = BenchTargets { unfused, fused };
    let stats = py
        .detach(move || commands::cmd_bench(&checkpoint, targets, iters, warmup))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    for (label, s) in stats {
        d.set_item(label, (s.mean_ms, s.std_ms))?;
    }
    Ok(d)
}

/// `{layer: [csi per filter]}`; also writes the CSV files into `out_dir`.
#[pyfunction]
#[pyo3(signature = (checkpoint, out_dir, layer = "all", dataset = None, data_dir = None, limit = None))]
fn selectivity<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    out_dir: PathBuf,
    layer: &str,
    dataset: Option<&str>,
    data_dir: Option<PathBuf>,
    limit: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let data = data_override(dataset, data_dir, limit)?;
    let layer = layer.to_string();
    let reports = py
        .detach(move || commands::cmd_selectivity(&checkpoint, &layer, &data, &out_dir))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    for r in reports {
        d.set_item(r.layer, r.csi)?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "lslu")]
fn lslu_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LsluError", m.py().get_type::<LsluError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySeries>()?;
    m.add_function(wrap_pyfunction!(base_activation, m)?)?;
    m.add_function(wrap_pyfunction!(selectivity_index, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(bench_latency, m)?)?;
    m.add_function(wrap_pyfunction!(selectivity, m)?)?;
    Ok(())
}
