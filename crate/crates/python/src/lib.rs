//! Python bindings. Structured results (logs, reports, overhead tables) come
//! back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use attnforge::backbone::{self, checkpoint, Family, ModelGraph, Scale};
use attnforge::data::{self, Dataset as CoreDataset, Split};
use attnforge::param::ParamGroup;
use attnforge::plan::{self, PlacementPlan};
use attnforge::train::{self, TrainConfig};
use attnforge::{Error, Tensor};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e if e.is_usage() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for attnforge::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn family(s: &str) -> PyResult<Family> {
    s.parse().map_err(PyValueError::new_err)
}

fn scale(s: &str) -> PyResult<Scale> {
    s.parse().map_err(PyValueError::new_err)
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

/// A placement plan.
#[pyclass(name = "Plan", module = "attnforge_py", frozen)]
struct PyPlan {
    inner: PlacementPlan,
}

#[pymethods]
impl PyPlan {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        plan::parse_plan(text).map(|inner| Self { inner }).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// `baseline`, `v1`, `v2` or `v3` for a family.
    #[staticmethod]
    #[pyo3(signature = (family_id, name, scale_id = "toy"))]
    fn canonical(family_id: &str, name: &str, scale_id: &str) -> PyResult<Self> {
        let plans = plan::canonical_plans(family(family_id)?, scale(scale_id)?);
        plans.get(name).cloned().map(|inner| Self { inner }).ok_or_else(|| {
            PyValueError::new_err(format!("unknown canonical plan `{name}`; valid: {}", plan::CANONICAL_NAMES.join(", ")))
        })
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family.to_string()
    }

    /// `(kind, hook)` pairs in execution order.
    fn insertions(&self) -> Vec<(String, String)> {
        self.inner.insertions.iter().map(|i| (i.kind().to_string(), i.hook.clone())).collect()
    }

    fn count(&self, kind: &str) -> PyResult<usize> {
        match kind.to_ascii_uppercase().as_str() {
            "SE" => Ok(self.inner.count(attnforge::attention::AttentionKind::Se)),
            "SA" => Ok(self.inner.count(attnforge::attention::AttentionKind::Sa)),
            _ => Err(PyValueError::new_err(format!("unknown attention kind `{kind}`"))),
        }
    }

    fn serialize(&self) -> String {
        self.inner.serialize()
    }

    fn __len__(&self) -> usize {
        self.inner.insertions.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Plan({}, {} insertions)", self.inner.family, self.inner.insertions.len())
    }
}

/// A labelled image set.
#[pyclass(name = "Dataset", module = "attnforge_py", frozen)]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (path, test = false))]
    fn load_raw(path: PathBuf, test: bool) -> PyResult<Self> {
        let split = if test { Split::Test } else { Split::Train };
        data::load_raw_dataset(&path, split).py().map(|inner| Self { inner })
    }

    /// Class-per-directory image tree, resized to `size`.
    #[staticmethod]
    #[pyo3(signature = (root, size, test = false))]
    fn load_images(root: PathBuf, size: usize, test: bool) -> PyResult<Self> {
        let split = if test { Split::Test } else { Split::Train };
        data::load_image_dataset(&root, size, None, split).py().map(|inner| Self { inner })
    }

    fn save_raw(&self, path: PathBuf) -> PyResult<()> {
        data::save_raw_dataset(&self.inner, &path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn image_size(&self) -> Option<usize> {
        self.inner.image_size()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    /// Pixels of sample `i` as a flat CHW list.
    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        self.inner
            .samples
            .get(i)
            .map(|s| s.image.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }
}

/// A backbone with its attached attention modules.
#[pyclass(name = "Model", module = "attnforge_py")]
struct PyModel {
    inner: ModelGraph<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (family_id, scale_id = "toy", num_classes = 4, seed = 0))]
    fn new(family_id: &str, scale_id: &str, num_classes: usize, seed: u64) -> PyResult<Self> {
        backbone::build_backbone(family(family_id)?, scale(scale_id)?, num_classes, seed).py().map(|inner| Self { inner })
    }

    /// A copy of this model with the plan's modules attached.
    fn attach(&self, plan: &PyPlan) -> PyResult<Self> {
        self.inner.attach_attention(&plan.inner).py().map(|inner| Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::load(&path).py().map(|inner| Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).py()
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family().to_string()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn plan(&self) -> PyPlan {
        PyPlan { inner: self.inner.plan().clone() }
    }

    /// `(name, channels)` for every hook point.
    fn hooks(&self) -> Vec<(String, usize)> {
        self.inner.list_hook_points()
    }

    /// Parameter count, optionally restricted to `backbone` or `attention`.
    #[pyo3(signature = (group = None))]
    fn count_params(&self, group: Option<&str>) -> PyResult<usize> {
        let g = match group {
            None => None,
            Some("backbone") => Some(ParamGroup::Backbone),
            Some("attention") => Some(ParamGroup::Attention),
            Some(other) => return Err(PyValueError::new_err(format!("unknown group `{other}`"))),
        };
        Ok(self.inner.count_params(g))
    }

    /// Eval-mode logits for a flat NCHW batch; returns `(logits, [N, K])`.
    fn predict(&self, pixels: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let x = Tensor::new(shape, pixels).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let y = self.inner.predict(&x).py()?;
        Ok((y.data().to_vec(), y.shape().to_vec()))
    }

    /// Parameters and multiply-accumulates a plan would add.
    #[pyo3(signature = (plan, batch = 1))]
    fn overhead<'py>(&self, py: Python<'py>, plan: &PyPlan, batch: usize) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.input_size();
        let r = attnforge::attention::attention_overhead(&self.inner, &plan.inner, &[batch, 3, s, s]).py()?;
        serialize(py, &r)
    }

    #[pyo3(signature = (dataset, plan_name = "custom"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, plan_name: &str) -> PyResult<Bound<'py, PyAny>> {
        let r = train::evaluate(&self.inner, &dataset.inner, plan_name).py()?;
        serialize(py, &r)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({}, {}, {} params, {} attention modules)",
            self.inner.family(),
            self.inner.scale(),
            self.inner.count_params(None),
            self.inner.plan().insertions.len()
        )
    }
}

#[pyfunction]
fn families() -> Vec<String> {
    Family::ALL.iter().map(|f| f.to_string()).collect()
}

#[pyfunction]
#[pyo3(signature = (family_id, scale_id = "toy"))]
fn hook_names(family_id: &str, scale_id: &str) -> PyResult<Vec<String>> {
    Ok(backbone::hook_names(family(family_id)?, scale(scale_id)?))
}

/// The synthetic four-class task as `(train, test)`.
#[pyfunction]
#[pyo3(signature = (n_per_class = 200, size = 32, seed = 0))]
fn gen_synthetic(n_per_class: usize, size: usize, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
    let (tr, te) = data::gen_synthetic(n_per_class, size, seed).py()?;
    Ok((PyDataset { inner: tr }, PyDataset { inner: te }))
}

/// Train in place; the model ends up holding the best epoch's weights.
/// Returns the training log.
#[pyfunction]
#[pyo3(signature = (
    model, train_set, eval_set, epochs = 60, batch_size = 32, lr_backbone = 1e-4, lr_attention = 6e-4,
    weight_decay = 1e-4, step_size = 10, gamma = 0.1, patience = 20, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn train_model<'py>(
    py: Python<'py>,
    model: &mut PyModel,
    train_set: &PyDataset,
    eval_set: &PyDataset,
    epochs: usize,
    batch_size: usize,
    lr_backbone: f64,
    lr_attention: f64,
    weight_decay: f64,
    step_size: usize,
    gamma: f64,
    patience: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let config = TrainConfig {
        epochs,
        batch_size,
        lr_backbone,
        lr_attention,
        weight_decay,
        step_size,
        gamma,
        patience,
        seed,
        ..TrainConfig::default()
    };
    let out = train::train(&mut model.inner, &train_set.inner, &eval_set.inner, &config, |_| {}).py()?;
    serialize(py, &out.log)
}

#[pyfunction]
#[pyo3(signature = (train_set, test_set, epochs = 30, lr = 1e-3, seed = 0))]
fn linear_probe(train_set: &PyDataset, test_set: &PyDataset, epochs: usize, lr: f64, seed: u64) -> PyResult<f64> {
    train::linear_probe(&train_set.inner, &test_set.inner, epochs, lr, seed).py()
}

/// Finite-difference check of `ops`, `se`, `sa` or `model`.
#[pyfunction]
#[pyo3(signature = (target, seed = 0, tol = 1e-4))]
fn gradcheck<'py>(py: Python<'py>, target: &str, seed: u64, tol: f64) -> PyResult<Bound<'py, PyAny>> {
    use attnforge::gradcheck::{run, Settings, Target};
    let t: Target = target.parse().map_err(PyValueError::new_err)?;
    let r = run(t, seed, tol, Settings::default()).py()?;
    let d = PyDict::new(py);
    d.set_item("target", target)?;
    d.set_item("passed", r.passed())?;
    d.set_item("max_rel_err", r.max_rel_err())?;
    d.set_item("checked", r.checked())?;
    d.set_item("entries", serialize(py, &r.entries)?)?;
    Ok(d.into_any())
}

/// Confusion matrix and macro metrics from predictions and labels.
#[pyfunction]
fn classification_report<'py>(
    py: Python<'py>,
    preds: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
) -> PyResult<Bound<'py, PyAny>> {
    use attnforge::metrics::{confusion_matrix, EvalReport, Fingerprint};
    let cm = confusion_matrix(&preds, &labels, num_classes).py()?;
    let fp = Fingerprint { model: String::new(), plan: String::new(), seed: 0 };
    serialize(py, &EvalReport::from_confusion(cm, fp))
}

#[pymodule]
fn attnforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlan>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(families, m)?)?;
    m.add_function(wrap_pyfunction!(hook_names, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    Ok(())
}
