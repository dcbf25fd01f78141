//! Python bindings: corpus generation, tokenization, training, checkpoints,
//! inference, evaluation and the loss primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::Value;

use maskclip_core::audit::run_gradcheck;
use maskclip_core::checkpoint::Checkpoint;
use maskclip_core::corpus::{self, Geometry, SceneOptions};
use maskclip_core::distillation;
use maskclip_core::encoders::Inference;
use maskclip_core::error::Error;
use maskclip_core::evaluation::{self, PromptSet};
use maskclip_core::masking;
use maskclip_core::objectives;
use maskclip_core::params::ParamStore;
use maskclip_core::tensor::{Graph, Tensor};
use maskclip_core::trainer::{self as core_trainer, Dataset, TrainConfig};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn core<T, E: Into<Error>>(r: Result<T, E>) -> PyResult<T> {
    r.map_err(|e| err(e.into()))
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_bound_py_any(py),
            (None, Some(u)) => u.into_bound_py_any(py),
            _ => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_bound_py_any(py)
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_bound_py_any(py)
        }
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core(serde_json::to_value(v))?)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    evaluation::rows_of(t)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    core(Tensor::from_rows(rows))
}

/// Writes a synthetic corpus to `out` and returns the record count.
#[pyfunction]
#[pyo3(signature = (n, seed, out, single_object = false, force = false))]
fn generate_corpus(n: usize, seed: u64, out: PathBuf, single_object: bool, force: bool) -> PyResult<usize> {
    let opts = if single_object {
        SceneOptions::single_object()
    } else {
        SceneOptions::default()
    };
    let samples = core(corpus::generate_samples(n, seed, &opts))?;
    core(corpus::write_corpus(&samples, Geometry::default(), &out, force))?;
    Ok(samples.len())
}

/// Records of a corpus directory as dicts (id, caption, labels, image).
#[pyfunction]
fn load_corpus(py: Python<'_>, dir: PathBuf) -> PyResult<Vec<Bound<'_, PyDict>>> {
    let samples = core(corpus::load_corpus(&dir))?;
    samples
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("id", s.id)?;
            d.set_item("caption", &s.caption.text)?;
            d.set_item("labels", s.labels.clone())?;
            d.set_item("shape", s.primary_shape().word())?;
            d.set_item("image_size", [s.image.height(), s.image.width()])?;
            d.set_item("image", s.image.data().to_vec())?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn vocabulary() -> Vec<&'static str> {
    corpus::VOCABULARY.to_vec()
}

/// Fixed-length tokenizer over the closed vocabulary.
#[pyclass(module = "maskclip")]
struct Tokenizer {
    inner: corpus::Tokenizer,
}

#[pymethods]
impl Tokenizer {
    #[new]
    #[pyo3(signature = (context_length = 32))]
    fn new(context_length: usize) -> PyResult<Self> {
        Ok(Self {
            inner: core(corpus::Tokenizer::new(context_length))?,
        })
    }

    /// Token ids and the eos position.
    fn tokenize(&self, text: &str) -> (Vec<usize>, usize) {
        let t = self.inner.tokenize(text);
        (t.ids().to_vec(), t.eos_position())
    }
}

/// The default training configuration as a dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    json_to_py(py, &TrainConfig::default())
}

fn parse_config(config: Option<&str>) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    core(cfg.validate())?;
    Ok(cfg)
}

/// A pretraining run over a corpus directory.
#[pyclass(module = "maskclip")]
struct Trainer {
    inner: core_trainer::Trainer,
}

#[pymethods]
impl Trainer {
    /// `config` is a JSON string of (partial) training settings.
    #[new]
    #[pyo3(signature = (corpus_dir, config = None))]
    fn new(corpus_dir: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let samples = core(corpus::load_corpus(&corpus_dir))?;
        let data = core(Dataset::from_samples(&samples, &cfg.model))?;
        Ok(Self {
            inner: core(core_trainer::Trainer::new(cfg, data))?,
        })
    }

    /// Resumes from a checkpoint written by a run on the same corpus.
    #[staticmethod]
    fn resume(corpus_dir: PathBuf, checkpoint: PathBuf) -> PyResult<Self> {
        let ckpt = core(Checkpoint::load(&checkpoint))?;
        let samples = core(corpus::load_corpus(&corpus_dir))?;
        let data = core(Dataset::from_samples(&samples, &ckpt.config.model))?;
        Ok(Self {
            inner: core(core_trainer::Trainer::from_checkpoint(&ckpt, data))?,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step()
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.total_steps()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    /// One optimizer step; returns its metrics.
    fn train_step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let m = core(self.inner.train_step())?;
        json_to_py(py, &m)
    }

    /// Trains to the end (or `stop_epoch`), writing logs and checkpoints to
    /// `out` if given. Returns the per-step metrics.
    #[pyo3(signature = (out = None, stop_epoch = None))]
    fn run<'py>(&mut self, py: Python<'py>, out: Option<PathBuf>, stop_epoch: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let inner = &mut self.inner;
        let summary = py.detach(|| inner.run(out.as_deref(), stop_epoch));
        let summary = core(summary)?;
        json_to_py(py, &summary.history)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core(self.inner.checkpoint().save(&path))
    }

    /// Parameter names and shapes.
    fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.inner.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }
}

/// A trained checkpoint opened for inference and evaluation.
#[pyclass(module = "maskclip")]
struct Model {
    ckpt: Checkpoint,
}

impl Model {
    fn inference(&self) -> PyResult<Inference<'_>> {
        Ok(Inference::new(&self.ckpt.config.model, core(self.ckpt.params())?))
    }

    fn tokenizer(&self) -> PyResult<corpus::Tokenizer> {
        core(corpus::Tokenizer::new(self.ckpt.config.model.text.context_length))
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: core(Checkpoint::load(&path))?,
        })
    }

    /// Checkpoint summary (step, objective, groups, config).
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.ckpt.summary())
    }

    /// Unit text embeddings, one row per string.
    fn text_embeddings(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let tok = self.tokenizer()?;
        let seqs: Vec<_> = texts.iter().map(|t| tok.tokenize(t)).collect();
        Ok(rows(&core(self.inference()?.text_embeddings(&seqs.iter().collect::<Vec<_>>()))?))
    }

    /// Unit image embeddings of every record in a corpus directory.
    fn image_embeddings(&self, corpus_dir: PathBuf) -> PyResult<Vec<Vec<f64>>> {
        let samples = core(corpus::load_corpus(&corpus_dir))?;
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        Ok(rows(&core(self.inference()?.image_embeddings(&images))?))
    }

    /// Zero-shot shape classification report on a single-object corpus.
    fn zero_shot<'py>(&self, py: Python<'py>, corpus_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let inf = self.inference()?;
        let samples = core(corpus::load_corpus(&corpus_dir))?;
        let bank = core(evaluation::build_label_embeddings(&inf, &evaluation::shape_classes(&PromptSet::default())))?;
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let r = core(evaluation::zero_shot_classify(
            &core(inf.image_embeddings(&images))?,
            &bank,
            &evaluation::shape_labels(&samples),
        ))?;
        json_to_py(py, &r)
    }

    /// Dense zero-shot segmentation report.
    fn segment<'py>(&self, py: Python<'py>, corpus_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let inf = self.inference()?;
        let samples = core(corpus::load_corpus(&corpus_dir))?;
        let bank = core(evaluation::build_label_embeddings(&inf, &evaluation::segmentation_classes(&PromptSet::default())))?;
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let r = core(evaluation::dense_zero_shot_segment(
            &core(inf.patch_embeddings(&images))?,
            &bank,
            &evaluation::patch_truth(&samples),
        ))?;
        json_to_py(py, &r)
    }

    /// Image-text retrieval recall over a corpus.
    fn retrieval<'py>(&self, py: Python<'py>, corpus_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let inf = self.inference()?;
        let tok = self.tokenizer()?;
        let samples = core(corpus::load_corpus(&corpus_dir))?;
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let seqs: Vec<_> = samples.iter().map(|s| tok.tokenize(&s.caption.text)).collect();
        let r = core(evaluation::retrieval_eval(
            &core(inf.image_embeddings(&images))?,
            &core(inf.text_embeddings(&seqs.iter().collect::<Vec<_>>()))?,
        ))?;
        json_to_py(py, &r)
    }

    /// Patch-text cosine similarities for one record, in patch order.
    #[pyo3(signature = (corpus_dir, index, text = None))]
    fn similarity_grid(&self, corpus_dir: PathBuf, index: usize, text: Option<String>) -> PyResult<Vec<f64>> {
        let inf = self.inference()?;
        let samples = core(corpus::load_corpus(&corpus_dir))?;
        let s = samples
            .iter()
            .find(|s| s.id == index)
            .ok_or_else(|| PyValueError::new_err(format!("no record with id {index}")))?;
        let text = text.unwrap_or_else(|| s.caption.text.clone());
        let p = core(inf.patch_embeddings(&[&s.image]))?;
        let e = core(inf.text_embeddings(&[&self.tokenizer()?.tokenize(&text)]))?;
        Ok(evaluation::similarity_grid(p.data(), p.last_dim(), e.row(0)))
    }
}

/// Recall@{1,5,10} both ways for paired unit embeddings.
#[pyfunction]
fn retrieval_eval<'py>(py: Python<'py>, image: Vec<Vec<f64>>, text: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &core(evaluation::retrieval_eval(&matrix(&image)?, &matrix(&text)?))?)
}

/// Dataset-level per-class IoU and mIoU.
#[pyfunction]
fn mean_iou(pred: Vec<Vec<usize>>, truth: Vec<Vec<usize>>, num_classes: usize) -> PyResult<(Vec<Option<f64>>, f64)> {
    core(evaluation::mean_iou(&pred, &truth, num_classes))
}

/// Standardized softmax-regression probe; returns (train acc, test acc).
#[pyfunction]
fn linear_probe(
    train_x: Vec<Vec<f64>>,
    train_y: Vec<usize>,
    test_x: Vec<Vec<f64>>,
    test_y: Vec<usize>,
) -> PyResult<(f64, f64)> {
    let r = core(evaluation::linear_probe(&train_x, &train_y, &test_x, &test_y, &Default::default()))?;
    Ok((r.train_accuracy, r.test_accuracy))
}

/// (L_I, L_T) for unit-norm embedding rows at temperature `sigma`.
#[pyfunction]
fn contrastive_loss(image: Vec<Vec<f64>>, text: Vec<Vec<f64>>, sigma: f64) -> PyResult<(f64, f64)> {
    let mut g = Graph::new();
    let ei = g.constant(matrix(&image)?);
    let et = g.constant(matrix(&text)?);
    let ls = g.constant(Tensor::scalar(sigma.ln()));
    let (li, lt) = core(objectives::contrastive_loss(&mut g, ei, et, ls))?;
    Ok((core(g.value(li).item())?, core(g.value(lt).item())?))
}

/// Elementwise smooth-L1 with threshold `beta`.
#[pyfunction]
#[pyo3(signature = (a, b, beta = 2.0))]
fn smooth_l1(a: Vec<f64>, b: Vec<f64>, beta: f64) -> PyResult<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_slice(&a));
    let y = g.constant(Tensor::from_slice(&b));
    let z = core(g.smooth_l1(x, y, beta))?;
    Ok(g.value(z).data().to_vec())
}

#[pyfunction]
fn mask_count(n: usize, ratio: f64) -> usize {
    masking::mask_count(n, ratio)
}

/// A random mask as (masked, visible) 0-based indices.
#[pyfunction]
fn sample_mask(n: usize, ratio: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let mut rng = core_trainer::stream_rng(seed, 0, 0);
    let m = core(masking::sample_mask(n, ratio, &mut rng))?;
    Ok((m.masked().to_vec(), m.visible().to_vec()))
}

/// One EMA step `θ̄ ← α·θ̄ + (1 − α)·θ` over flat parameter lists.
#[pyfunction]
fn ema_update(teacher: Vec<f64>, student: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let mut t = ParamStore::new();
    t.insert("p", Tensor::from_slice(&teacher));
    let mut s = ParamStore::new();
    s.insert("p", Tensor::from_slice(&student));
    core(distillation::ema_update(&mut t, &s, alpha))?;
    Ok(core(t.get("p"))?.data().to_vec())
}

/// The finite-difference gradient suite report.
#[pyfunction]
#[pyo3(signature = (reps = 10, seed = 0))]
fn gradcheck<'py>(py: Python<'py>, reps: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| run_gradcheck(reps, seed));
    json_to_py(py, &core(r)?)
}

#[pymodule]
pub fn maskclip(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tokenizer>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_eval, m)?)?;
    m.add_function(wrap_pyfunction!(mean_iou, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(mask_count, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(ema_update, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
