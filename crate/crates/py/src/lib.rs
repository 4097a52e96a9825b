//! Python bindings for the `maskprompt` pipeline.
//!
//! Build with `cargo build -p maskprompt-py --release --features extension-module`
//! and copy `libmaskprompt_py.so` to `maskprompt.so` somewhere on `sys.path`.

use std::path::PathBuf;

use maskprompt::corpus::StyleLabel;
use maskprompt::embed::{load_embeddings, persist_embeddings, EmbeddingMatrix, Origin, RowMeta};
use maskprompt::lingua::{analyze, mask_caption as mask_tagged, LexiconTagger, MaskedCaption};
use maskprompt::metrics::{self, GrayImage, SsimParams};
use maskprompt::mock::{write_mock_dataset as write_mock, MockCounts};
use maskprompt::pipeline::{run_experiment, Backends, ExperimentConfig, Overrides, PipelineError};
use maskprompt::probe::{self, ProbeModel, TrainConfig};
use maskprompt::promptkit::{self, PromptStrategy, Validation, ValidationPolicy};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e.exit_code() {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_style(s: &str) -> PyResult<StyleLabel> {
    s.parse().map_err(value_err)
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Style names in label order.
#[pyfunction]
fn style_labels() -> Vec<String> {
    StyleLabel::ALL.iter().map(|s| s.as_str().to_string()).collect()
}

/// A caption with some nouns and adjectives replaced by `[MASK]`.
#[pyclass(name = "MaskedCaption", frozen)]
struct PyMaskedCaption {
    inner: MaskedCaption,
}

#[pymethods]
impl PyMaskedCaption {
    #[getter]
    fn text(&self) -> &str {
        &self.inner.source.text
    }

    #[getter]
    fn masked_text(&self) -> &str {
        &self.inner.masked_text
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.source.tokens.iter().map(|t| t.surface.clone()).collect()
    }

    #[getter]
    fn maskable(&self) -> Vec<usize> {
        self.inner.source.maskable_positions()
    }

    #[getter]
    fn mask_positions(&self) -> Vec<usize> {
        self.inner.mask_positions.iter().copied().collect()
    }

    /// `(accepted, reason)` for a filled-in caption.
    #[pyo3(signature = (completion, max_words_per_mask = 3))]
    fn validate(&self, completion: &str, max_words_per_mask: usize) -> (bool, Option<String>) {
        let policy = ValidationPolicy {
            max_words_per_mask,
            ..ValidationPolicy::default()
        };
        match promptkit::validate_completion(&self.inner, completion, &policy) {
            Validation::Accepted => (true, None),
            Validation::Rejected { reason } => (false, Some(reason)),
        }
    }

    fn __repr__(&self) -> String {
        format!("MaskedCaption({:?})", self.inner.masked_text)
    }
}

/// Tags `text` with the built-in lexicon and masks `ratio` of its nouns and adjectives.
#[pyfunction]
#[pyo3(signature = (text, ratio = 0.5, seed = 0))]
fn mask_caption(text: &str, ratio: f64, seed: u64) -> PyResult<PyMaskedCaption> {
    let tagged = analyze(text, &LexiconTagger::builtin()).map_err(value_err)?;
    let inner = mask_tagged(&tagged, ratio, seed).map_err(value_err)?;
    Ok(PyMaskedCaption { inner })
}

/// Text-to-image prompt for `strategy` ("class", "caption" or "mlp").
#[pyfunction]
#[pyo3(signature = (strategy, class_name = None, caption = None))]
fn render_prompt(strategy: &str, class_name: Option<&str>, caption: Option<&str>) -> PyResult<String> {
    let strategy: PromptStrategy = strategy.parse().map_err(PyValueError::new_err)?;
    promptkit::render_prompt(strategy, class_name, caption).map_err(value_err)
}

fn gray(rows: Vec<Vec<f64>>) -> PyResult<GrayImage> {
    let h = rows.len();
    let w = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image rows differ in length"));
    }
    Ok(GrayImage::new(w as u32, h as u32, rows.into_iter().flatten().collect()))
}

/// Mean SSIM of two grayscale images given as lists of rows.
#[pyfunction]
#[pyo3(signature = (a, b, win_size = 7, data_range = 255.0))]
fn ssim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, win_size: usize, data_range: f64) -> PyResult<f64> {
    let params = SsimParams {
        win_size,
        data_range,
        ..SsimParams::default()
    };
    metrics::ssim(&gray(a)?, &gray(b)?, &params).map_err(value_err)
}

/// SSIM of two image files after BT.601 luma conversion.
#[pyfunction]
fn ssim_files(a: PathBuf, b: PathBuf) -> PyResult<f64> {
    let a = GrayImage::load(&a).map_err(value_err)?;
    let b = GrayImage::load(&b).map_err(value_err)?;
    metrics::ssim(&a, &b, &SsimParams::default()).map_err(value_err)
}

fn unlabeled(rows: Vec<Vec<f32>>) -> PyResult<EmbeddingMatrix> {
    let d = rows.first().map(Vec::len).unwrap_or(0);
    let manifest = (0..rows.len())
        .map(|i| RowMeta {
            id: i.to_string(),
            label: StyleLabel::ALL[0],
            origin: Origin::Real,
        })
        .collect();
    EmbeddingMatrix::from_rows(d, rows, manifest, false).map_err(value_err)
}

/// Scaled, biased RBF-kernel MMD² between two sets of vectors.
#[pyfunction]
#[pyo3(signature = (x, y, sigma = 10.0, scale = 1000.0))]
fn mmd(x: Vec<Vec<f32>>, y: Vec<Vec<f32>>, sigma: f64, scale: f64) -> PyResult<f64> {
    metrics::mmd_rbf(&unlabeled(x)?, &unlabeled(y)?, sigma, scale).map_err(value_err)
}

/// Labelled embedding rows with `EMBV1` serialisation.
#[pyclass(name = "Embeddings", frozen)]
struct PyEmbeddings {
    inner: EmbeddingMatrix,
}

#[pymethods]
impl PyEmbeddings {
    /// `rows` is a list of equal-length float lists; `labels` are style names.
    #[new]
    #[pyo3(signature = (rows, labels, ids = None, synthetic = false))]
    fn new(rows: Vec<Vec<f32>>, labels: Vec<String>, ids: Option<Vec<String>>, synthetic: bool) -> PyResult<Self> {
        if rows.len() != labels.len() {
            return Err(PyValueError::new_err("rows and labels differ in length"));
        }
        let ids = ids.unwrap_or_else(|| (0..rows.len()).map(|i| format!("row-{i}")).collect());
        if ids.len() != rows.len() {
            return Err(PyValueError::new_err("rows and ids differ in length"));
        }
        let origin = if synthetic { Origin::Synthetic } else { Origin::Real };
        let manifest = ids
            .into_iter()
            .zip(&labels)
            .map(|(id, l)| Ok(RowMeta { id, label: parse_style(l)?, origin }))
            .collect::<PyResult<Vec<_>>>()?;
        let d = rows.first().map(Vec::len).unwrap_or(0);
        let inner = EmbeddingMatrix::from_rows(d, rows, manifest, false).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        self.inner.rows().map(<[f32]>::to_vec).collect()
    }

    fn labels(&self) -> Vec<String> {
        self.inner.labels().iter().map(|l| l.as_str().to_string()).collect()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.manifest.iter().map(|m| m.id.clone()).collect()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    /// Matrix from `EMBV1` bytes; row metadata is not part of the format.
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingMatrix::from_bytes(data).map_err(value_err)?,
        })
    }

    /// Writes the matrix and its `.manifest.json` sidecar.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        persist_embeddings(&self.inner, &path).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_embeddings(&path).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.n
    }

    fn __repr__(&self) -> String {
        format!("Embeddings(n={}, d={})", self.inner.n, self.inner.d)
    }
}

/// Trained linear probe.
#[pyclass(name = "Probe", frozen)]
struct PyProbe {
    model: ProbeModel,
    history: String,
}

#[pymethods]
impl PyProbe {
    #[getter]
    fn classes(&self) -> Vec<String> {
        self.model.classes.iter().map(|c| c.as_str().to_string()).collect()
    }

    /// Epoch records, best epoch and best validation loss.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_loads(py, &self.history)
    }

    fn predict(&self, x: &PyEmbeddings) -> PyResult<Vec<String>> {
        let labels = self.model.predict(&x.inner).map_err(value_err)?;
        Ok(labels.iter().map(|l| l.as_str().to_string()).collect())
    }

    fn accuracy(&self, x: &PyEmbeddings) -> PyResult<f64> {
        let pred = self.model.predict(&x.inner).map_err(value_err)?;
        metrics::accuracy(&pred, &x.inner.labels()).map_err(value_err)
    }
}

/// Trains a probe on real (and optionally synthetic) rows with early stopping
/// on `val`. `config` takes the same keys as the `training` config section.
#[pyfunction]
#[pyo3(signature = (real, val, synthetic = None, classes = None, config = None))]
fn train_probe(
    py: Python<'_>,
    real: &PyEmbeddings,
    val: &PyEmbeddings,
    synthetic: Option<&PyEmbeddings>,
    classes: Option<Vec<String>>,
    config: Option<&str>,
) -> PyResult<PyProbe> {
    let classes = match classes {
        Some(names) => names.iter().map(|n| parse_style(n)).collect::<PyResult<Vec<_>>>()?,
        None => {
            let mut seen: Vec<StyleLabel> = real.inner.labels();
            seen.sort();
            seen.dedup();
            seen
        }
    };
    let cfg: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(value_err)?,
        None => TrainConfig::default(),
    };
    let syn = synthetic.map(|s| &s.inner);
    let (model, history) = py
        .detach(|| probe::train_probe(&real.inner, syn, &val.inner, &classes, &cfg))
        .map_err(value_err)?;
    Ok(PyProbe {
        model,
        history: serde_json::to_string(&history).map_err(value_err)?,
    })
}

/// Writes a `train|val|test/<style>/*.png` mock dataset; returns the file count.
#[pyfunction]
#[pyo3(signature = (root, train = 4, val = 2, test = 3, size = 32, seed = 0))]
fn write_mock_dataset(root: PathBuf, train: usize, val: usize, test: usize, size: u32, seed: u64) -> PyResult<usize> {
    write_mock(&root, &StyleLabel::ALL, MockCounts { train, val, test }, size, seed).map_err(value_err)
}

/// Validates a config file against the bundled schema and returns the
/// effective config (defaults filled in) as a dict.
#[pyfunction]
fn load_config<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::load(&path).map_err(pipeline_err)?;
    json_loads(py, &serde_json::to_string(&cfg).map_err(value_err)?)
}

/// Runs every (n_shot, seed) cell and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (config, mock = false, strategy = None, resume = None))]
fn run<'py>(
    py: Python<'py>,
    config: PathBuf,
    mock: bool,
    strategy: Option<&str>,
    resume: Option<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = ExperimentConfig::load(&config).map_err(pipeline_err)?;
    let strategy = strategy
        .map(|s| s.parse::<PromptStrategy>())
        .transpose()
        .map_err(PyValueError::new_err)?;
    let resuming = resume.is_some();
    cfg.apply(&Overrides {
        strategy,
        mock,
        resume,
        ..Overrides::default()
    })
    .map_err(pipeline_err)?;
    let report = py
        .detach(|| {
            let backends = Backends::from_config(&cfg.backends)?;
            run_experiment(&cfg, &backends, resuming)
        })
        .map_err(pipeline_err)?;
    json_loads(py, &serde_json::to_string(&report).map_err(value_err)?)
}

#[pymodule(name = "maskprompt")]
fn maskprompt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMaskedCaption>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyProbe>()?;
    m.add_function(wrap_pyfunction!(style_labels, m)?)?;
    m.add_function(wrap_pyfunction!(mask_caption, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_files, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(train_probe, m)?)?;
    m.add_function(wrap_pyfunction!(write_mock_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
