//! Python bindings: phantom cohorts, the synthesis network and the
//! evaluation metrics. Volumes cross the boundary as C-ordered float32
//! arrays of shape `(z, y, x)`.

use numpy::{PyArray1, PyArray3, PyArrayMethods, PyReadonlyArray3, PyUntypedArrayMethods};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use voxsynth::classifier;
use voxsynth::metrics;
use voxsynth::phantom::{self, CohortSpec, Profile, SplitFractions};
use voxsynth::synthnet::{self, SynthConfig};
use voxsynth::trainer::{train_synth, SynthTrainConfig};
use voxsynth::volume::{self, Modality, SubjectRecord, Volume3D};
use voxsynth::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(format!("[{}] {e}", e.class())),
    }
}

fn to_numpy<'py>(py: Python<'py>, v: &Volume3D) -> PyResult<Bound<'py, PyArray3<f32>>> {
    PyArray1::from_vec(py, v.data.clone()).reshape(v.dims)
}

fn from_numpy(a: &PyReadonlyArray3<f32>, modality: Modality) -> PyResult<Volume3D> {
    let s = a.shape();
    let data: Vec<f32> = a.as_array().iter().copied().collect();
    Volume3D::new([s[0], s[1], s[2]], [1.0; 3], data, modality).map_err(py_err)
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        serde_json::Value::Number(n) => match n.as_u64() {
            Some(u) => u.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        serde_json::Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        serde_json::Value::Array(a) => PyList::new(py, a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any().unbind(),
        serde_json::Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    json_to_py(py, &serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?)
}

fn parse_toml<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(format!("[parse] {}", e.message()))),
    }
}

/// One subject of a cohort.
#[pyclass(frozen, from_py_object, module = "voxsynth")]
#[derive(Clone)]
struct Subject {
    inner: SubjectRecord,
}

#[pymethods]
impl Subject {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label.to_string()
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split.to_string()
    }

    #[getter]
    fn severity(&self) -> Option<f64> {
        self.inner.severity
    }

    fn t1w<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray3<f32>>> {
        to_numpy(py, &self.inner.t1w)
    }

    fn fa<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyArray3<f32>>>> {
        self.inner.fa.as_ref().map(|v| to_numpy(py, v)).transpose()
    }

    fn md<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyArray3<f32>>>> {
        self.inner.md.as_ref().map(|v| to_numpy(py, v)).transpose()
    }

    fn mask<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray3<f32>>> {
        to_numpy(py, &self.inner.mask_or_full())
    }

    fn __repr__(&self) -> String {
        format!("Subject(id={:?}, label={}, split={})", self.inner.id, self.inner.label, self.inner.split)
    }
}

fn wrap(subjects: Vec<SubjectRecord>) -> Vec<Subject> {
    subjects.into_iter().map(|inner| Subject { inner }).collect()
}

fn unwrap(subjects: &[Subject]) -> Vec<SubjectRecord> {
    subjects.iter().map(|s| s.inner.clone()).collect()
}

#[pyfunction]
#[pyo3(signature = (dims, n_per_class, profile = "A", seed = 0, val = 0.1, test = 0.1))]
fn generate_cohort(dims: [usize; 3], n_per_class: usize, profile: &str, seed: u64, val: f64, test: f64) -> PyResult<Vec<Subject>> {
    let profile = match profile {
        "A" => Profile::A,
        "B" => Profile::B,
        other => return Err(PyValueError::new_err(format!("unknown profile `{other}` (A, B)"))),
    };
    let spec = CohortSpec { dims, n_per_class, profile, seed, split: SplitFractions { val, test } };
    phantom::generate_cohort(&spec).map(wrap).map_err(py_err)
}

#[pyfunction]
fn load_cohort(dir: &str) -> PyResult<Vec<Subject>> {
    volume::load_cohort(dir).map(wrap).map_err(py_err)
}

/// Writes the cohort and returns the manifest entries.
#[pyfunction]
fn save_cohort(py: Python<'_>, dir: &str, subjects: Vec<Subject>) -> PyResult<Py<PyAny>> {
    to_py(py, &volume::save_cohort(dir, &unwrap(&subjects)).map_err(py_err)?)
}

/// The 3D synthesis network.
#[pyclass(module = "voxsynth")]
struct SynthModel {
    inner: synthnet::SynthModel,
}

#[pymethods]
impl SynthModel {
    /// `config` is the body of a `[synth]` TOML table; defaults fill
    /// absent keys.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: SynthConfig = parse_toml(config)?;
        Ok(SynthModel { inner: synthnet::build(cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(SynthModel { inner: synthnet::SynthModel::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.num_scalars()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    fn digest(&self) -> String {
        self.inner.params.digest()
    }

    /// Trains on the train split, early-stopping on the val split.
    /// `config` is the body of a `[train.synth]` table. Returns the
    /// training log as TSV.
    #[pyo3(signature = (subjects, config = None))]
    fn train(&mut self, py: Python<'_>, subjects: Vec<Subject>, config: Option<&str>) -> PyResult<String> {
        let cfg: SynthTrainConfig = parse_toml(config)?;
        let cohort = unwrap(&subjects);
        let model = &mut self.inner;
        let log = py.detach(|| train_synth(model, &cohort, &cfg)).map_err(py_err)?;
        Ok(log.to_tsv())
    }

    /// FA and MD predicted from a raw T1w volume; the model's input
    /// normalisation is applied over `mask`.
    #[pyo3(signature = (t1w, mask, stride = None))]
    fn predict<'py>(&mut self, py: Python<'py>, t1w: PyReadonlyArray3<f32>, mask: PyReadonlyArray3<f32>, stride: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let t1 = from_numpy(&t1w, Modality::T1w)?;
        let m = from_numpy(&mask, Modality::Mask)?;
        let stride = stride.unwrap_or((self.inner.config.patch_size / 2).max(1));
        let norm = volume::normalize(&t1, &m, self.inner.config.input_norm).map_err(py_err)?.volume;
        let model = &mut self.inner;
        let out = py.detach(|| synthnet::predict_volume(model, &norm, &m, stride)).map_err(py_err)?;
        let d = PyDict::new(py);
        for (k, v) in [("fa", out.fa), ("md", out.md)] {
            if let Some(v) = v {
                d.set_item(k, to_numpy(py, &v)?)?;
            }
        }
        Ok(d)
    }
}

/// MSE, MAE, RMSE, SSIM and Pearson r over masked voxels; SSIM and r are
/// None when undefined.
#[pyfunction]
fn synth_metrics(py: Python<'_>, pred: PyReadonlyArray3<f32>, reference: PyReadonlyArray3<f32>, mask: PyReadonlyArray3<f32>) -> PyResult<Py<PyAny>> {
    let p = from_numpy(&pred, Modality::Prediction)?;
    let r = from_numpy(&reference, Modality::Prediction)?;
    let m = from_numpy(&mask, Modality::Mask)?;
    to_py(py, &metrics::synth_metrics(&p, &r, &m).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (pred, reference, mask, window = metrics::SSIM_WINDOW))]
fn ssim3d(pred: PyReadonlyArray3<f32>, reference: PyReadonlyArray3<f32>, mask: PyReadonlyArray3<f32>, window: usize) -> PyResult<f64> {
    let p = from_numpy(&pred, Modality::Prediction)?;
    let r = from_numpy(&reference, Modality::Prediction)?;
    let m = from_numpy(&mask, Modality::Mask)?;
    metrics::ssim3d(&p, &r, &m, window, metrics::SSIM_K1, metrics::SSIM_K2).map_err(py_err)
}

/// Per-class and overall metrics of a confusion matrix (rows = truth).
#[pyfunction]
#[pyo3(signature = (confusion, positive = 0))]
fn class_metrics(py: Python<'_>, confusion: Vec<Vec<u64>>, positive: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &metrics::class_metrics(&confusion, positive).map_err(py_err)?)
}

#[pyfunction]
fn subject_auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    if scores.len() != positive.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    let pairs: Vec<(f64, bool)> = scores.into_iter().zip(positive).collect();
    metrics::subject_auc(&pairs).map_err(py_err)
}

/// Subject label ("AD" or "NC") and AD slice fraction from slice
/// probabilities.
#[pyfunction]
#[pyo3(signature = (slice_probs, threshold = 0.2))]
fn aggregate_binary(slice_probs: Vec<f64>, threshold: f64) -> PyResult<(String, f64)> {
    let (label, frac) = classifier::aggregate_binary(&slice_probs, threshold).map_err(py_err)?;
    Ok((label.to_string(), frac))
}

#[pymodule]
#[pyo3(name = "voxsynth")]
fn voxsynth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Subject>()?;
    m.add_class::<SynthModel>()?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(load_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(save_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(synth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(ssim3d, m)?)?;
    m.add_function(wrap_pyfunction!(class_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(subject_auc, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_binary, m)?)?;
    Ok(())
}
