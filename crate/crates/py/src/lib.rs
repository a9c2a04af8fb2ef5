//! Python bindings: presets, datasets, models, training runs and Fourier
//! analysis. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use grokking_core::analysis;
use grokking_core::checkpoint;
use grokking_core::experiment::{self, Experiment, ExperimentConfig, ExperimentError, Precision};
use grokking_core::model::{forward, init_params, mlp_activations, ModelConfig, Params};
use grokking_core::tasks::{Split, Task, TaskDataset};
use grokking_core::training::{evaluate, train};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn exp_err(e: ExperimentError) -> PyErr {
    match e.exit_code() {
        3 => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, text: String) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn to_py<T: ?Sized>(py: Python<'_>, value: &T, enc: fn(&T) -> serde_json::Result<String>) -> PyResult<Py<PyAny>> {
    json_to_py(py, enc(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

/// A resolved experiment: task, model and training settings plus seeds.
#[pyclass(name = "Experiment", from_py_object)]
#[derive(Clone)]
struct PyExperiment {
    inner: Experiment,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::preset(name).resolve().map_err(exp_err)?;
        Ok(PyExperiment { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_json(text)
            .and_then(|c| c.resolve())
            .map_err(exp_err)?;
        Ok(PyExperiment { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Copy with some training settings replaced.
    #[pyo3(signature = (*, max_epochs=None, learning_rate=None, weight_decay=None, eval_every=None, halt_at_test_acc=None))]
    fn with_training(
        &self,
        max_epochs: Option<u64>,
        learning_rate: Option<f64>,
        weight_decay: Option<f64>,
        eval_every: Option<u64>,
        halt_at_test_acc: Option<f64>,
    ) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        let t = &mut inner.train;
        t.max_epochs = max_epochs.unwrap_or(t.max_epochs);
        t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
        t.weight_decay = weight_decay.unwrap_or(t.weight_decay);
        t.eval_every = eval_every.unwrap_or(t.eval_every);
        t.halt_at_test_acc = halt_at_test_acc.or(t.halt_at_test_acc);
        inner.validate().map_err(exp_err)?;
        Ok(PyExperiment { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn comment(&self) -> &str {
        &self.inner.comment
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn model(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.model, serde_json::to_string)
    }

    #[getter]
    fn train(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.train, serde_json::to_string)
    }

    #[getter]
    fn task(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.task, serde_json::to_string)
    }

    fn __repr__(&self) -> String {
        format!("Experiment({:?}, seeds={:?})", self.inner.name, self.inner.seeds)
    }
}

/// Every input pair of a task with its label and train/test membership.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: TaskDataset,
}

#[pymethods]
impl PyDataset {
    /// `p` selects modular addition mod `p`; omit it for S5 composition.
    #[new]
    #[pyo3(signature = (p=None, seed=0))]
    fn new(p: Option<usize>, seed: u64) -> PyResult<Self> {
        let task = p.map_or(Task::S5Compose, |p| Task::ModAdd { p });
        Ok(PyDataset {
            inner: task.generate(seed).map_err(value_err)?,
        })
    }

    #[getter]
    fn sequences(&self) -> Vec<(usize, usize, usize)> {
        self.inner.sequences.iter().map(|s| (s[0], s[1], s[2])).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn train_indices(&self) -> Vec<usize> {
        self.inner.train_idx.clone()
    }

    #[getter]
    fn test_indices(&self) -> Vec<usize> {
        self.inner.test_idx.clone()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Transformer weights held at double precision.
#[pyclass(name = "Model")]
struct PyModel {
    config: ModelConfig,
    params: Params<f64>,
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("split must be 'train' or 'test', got {other:?}"))),
    }
}

#[pymethods]
impl PyModel {
    /// Fresh seeded initialisation for `experiment`'s architecture.
    #[new]
    #[pyo3(signature = (experiment, seed=0))]
    fn new(experiment: &PyExperiment, seed: u64) -> PyResult<Self> {
        let (config, _) = experiment.inner.for_seed(seed);
        let params = init_params(&config).map_err(value_err)?;
        Ok(PyModel { config, params })
    }

    #[staticmethod]
    fn load(experiment: &PyExperiment, path: PathBuf) -> PyResult<Self> {
        let config = experiment.inner.model.clone();
        let params = checkpoint::load(&path, &config).map_err(|e| match e {
            checkpoint::CheckpointError::Io(io) => PyIOError::new_err(format!("{}: {io}", path.display())),
            other => value_err(other),
        })?;
        Ok(PyModel { config, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.params).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.named().into_iter().map(|(n, _)| n).collect()
    }

    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        self.params
            .named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| (t.shape().to_vec(), t.data().to_vec()))
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name:?}")))
    }

    /// Logits at the final position, one row per `(a, b, op)` sequence.
    fn forward(&self, py: Python<'_>, sequences: Vec<[usize; 3]>) -> PyResult<Vec<Vec<f64>>> {
        let tokens: Vec<usize> = sequences.iter().flatten().copied().collect();
        let logits = py
            .detach(|| forward(&self.params, &self.config, &tokens))
            .map_err(value_err)?;
        Ok((0..logits.rows()).map(|r| logits.row(r).to_vec()).collect())
    }

    /// Post-ReLU MLP activations at the final position.
    fn mlp_activations(&self, py: Python<'_>, sequences: Vec<[usize; 3]>) -> PyResult<Vec<Vec<f64>>> {
        let tokens: Vec<usize> = sequences.iter().flatten().copied().collect();
        let acts = py
            .detach(|| mlp_activations(&self.params, &self.config, &tokens))
            .map_err(value_err)?;
        Ok((0..acts.rows()).map(|r| acts.row(r).to_vec()).collect())
    }

    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, split: &str) -> PyResult<Py<PyAny>> {
        let split = parse_split(split)?;
        let stats = py
            .detach(|| evaluate(&self.params, &self.config, &dataset.inner, split))
            .map_err(value_err)?;
        to_py(py, &stats, serde_json::to_string)
    }

    /// Fourier report; modular addition only.
    #[pyo3(signature = (dataset, top=5, grok_threshold=0.99))]
    fn analyze(&self, py: Python<'_>, dataset: &PyDataset, top: usize, grok_threshold: f64) -> PyResult<Py<PyAny>> {
        let report = py
            .detach(|| analysis::analyze(&self.params, &self.config, &dataset.inner, top, grok_threshold))
            .map_err(value_err)?;
        to_py(py, &report, serde_json::to_string)
    }
}

/// Trains one seed in memory. Returns the run record and the final model.
#[pyfunction]
#[pyo3(signature = (experiment, seed=0, f64=false))]
fn train_model(py: Python<'_>, experiment: &PyExperiment, seed: u64, f64: bool) -> PyResult<(Py<PyAny>, PyModel)> {
    let exp = &experiment.inner;
    let (config, train_cfg) = exp.for_seed(seed);
    let (record, params) = py
        .detach(|| -> Result<_, String> {
            let dataset = exp.task.generate(seed).map_err(|e| e.to_string())?;
            if f64 {
                let out = train::<f64>(&config, &dataset, &train_cfg, None).map_err(|e| e.to_string())?;
                Ok((out.record, out.params))
            } else {
                let out = train::<f32>(&config, &dataset, &train_cfg, None).map_err(|e| e.to_string())?;
                Ok((out.record, out.params.cast()))
            }
        })
        .map_err(PyValueError::new_err)?;
    Ok((to_py(py, &record, serde_json::to_string)?, PyModel { config, params }))
}

/// Trains one seed into `out_dir` exactly as `grok run` does; returns the summary.
#[pyfunction]
#[pyo3(signature = (experiment, seed, out_dir, f64=false, force=false))]
fn run(py: Python<'_>, experiment: &PyExperiment, seed: u64, out_dir: PathBuf, f64: bool, force: bool) -> PyResult<Py<PyAny>> {
    let precision = if f64 { Precision::F64 } else { Precision::F32 };
    let summary = py
        .detach(|| experiment::run_seed(&experiment.inner, seed, &out_dir, precision, force))
        .map_err(exp_err)?;
    to_py(py, &summary, serde_json::to_string)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    experiment::preset_names()
}

#[pymodule]
fn grokking(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
