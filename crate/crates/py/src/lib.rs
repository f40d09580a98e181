//! Python bindings: configuration, the pipeline commands, loaded corpora
//! and models, and the standalone metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ckf_core::cli;
use ckf_core::corpus::synthetic::SyntheticSpec;
use ckf_core::corpus::Corpus as CoreCorpus;
use ckf_core::eval::{self, Ranking};
use ckf_core::trainer::{BetaSchedule, CkfModel};
use ckf_core::CkfError;

fn err(e: CkfError) -> PyErr {
    match e {
        CkfError::Config { .. } | CkfError::Dispatch(_) => PyValueError::new_err(e.to_string()),
        CkfError::MissingArtifact { .. } => PyFileNotFoundError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Experiment configuration. Sections: corpus, cf, lm, fusion, train, eval.
#[pyclass(module = "ckf", from_py_object)]
#[derive(Clone, Default)]
struct Config {
    inner: cli::Config,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => cli::Config::from_json(text).map_err(err)?,
            None => cli::Config::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cli::Config::load(&path).map_err(err)?,
        })
    }

    /// New config with `section.key=value` overrides applied.
    fn set(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_overrides(&overrides).map_err(err)?,
        })
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| err(e.into()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(variant={}, tasks={:?}, d_llm={})",
            self.inner.train.variant, self.inner.train.tasks, self.inner.lm.d_llm
        )
    }
}

/// Writes `ratings.dat` / `movies.dat` for a synthetic two-genre corpus.
#[pyfunction]
#[pyo3(signature = (out, users=200, items=100, seed=0))]
fn gen_synthetic(out: PathBuf, users: usize, items: usize, seed: u64) -> PyResult<(PathBuf, PathBuf)> {
    let spec = SyntheticSpec {
        users,
        items,
        seed,
        ..SyntheticSpec::default()
    };
    cli::cmd_gen_synthetic(&spec, &out).map_err(err)
}

/// Returns the dataset statistics as a dict-like list of pairs.
#[pyfunction]
fn build_corpus(config: &Config, out: PathBuf) -> PyResult<Vec<(String, f64)>> {
    let s = cli::cmd_build_corpus(&config.inner, &out).map_err(err)?;
    Ok(vec![
        ("interactions".into(), s.interactions as f64),
        ("train".into(), s.train as f64),
        ("valid".into(), s.valid as f64),
        ("test".into(), s.test as f64),
        ("users".into(), s.users as f64),
        ("items".into(), s.items as f64),
        ("avg_u".into(), s.avg_u),
        ("avg_i".into(), s.avg_i),
    ])
}

/// Per-epoch CF losses.
#[pyfunction]
fn train_cf(py: Python<'_>, config: &Config, out: PathBuf) -> PyResult<Vec<f64>> {
    let cfg = config.inner.clone();
    py.detach(move || cli::cmd_train_cf(&cfg, &out)).map_err(err)
}

/// Per-epoch mean training losses.
#[pyfunction]
fn train(py: Python<'_>, config: &Config, out: PathBuf) -> PyResult<Vec<f64>> {
    let cfg = config.inner.clone();
    let report = py.detach(move || cli::cmd_train(&cfg, &out)).map_err(err)?;
    Ok(report.epochs.iter().map(|e| e.train_loss).collect())
}

/// The metrics report as a JSON string (also written to `metrics.json`).
#[pyfunction]
fn evaluate(py: Python<'_>, config: &Config, out: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    let report = py.detach(move || cli::cmd_evaluate(&cfg, &out)).map_err(err)?;
    report.to_json().map_err(err)
}

#[pyfunction]
fn export_embeddings(config: &Config, out: PathBuf) -> PyResult<(PathBuf, PathBuf)> {
    cli::cmd_export_embeddings(&config.inner, &out).map_err(err)
}

/// A built corpus loaded from a work directory.
#[pyclass(module = "ckf")]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    fn load(out: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cli::load_corpus(&out).map_err(err)?,
        })
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    fn title(&self, item: usize) -> PyResult<String> {
        self.inner
            .titles
            .get(item)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("no item {item}")))
    }

    fn stats(&self) -> String {
        self.inner.stats().to_string()
    }
}

/// A trained model loaded from a work directory.
#[pyclass(module = "ckf")]
struct Model {
    inner: CkfModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(out: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cli::load_model(&out).map_err(err)?,
        })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.spec.variant.to_string()
    }

    #[getter]
    fn tasks(&self) -> Vec<String> {
        self.inner.bank.tasks.iter().map(|t| t.name().to_string()).collect()
    }

    fn adapter_param_count(&self) -> usize {
        self.inner.adapter_param_count()
    }

    /// Total trainable scalars and the per-tensor listing.
    fn trainable_params(&self) -> PyResult<(usize, Vec<(String, usize)>)> {
        self.inner.trainable_params().map_err(err)
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.params.get(name).map_err(err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::auc(&scores, &labels).map_err(err)
}

/// Fraction of (candidates, scores, truth) lists ranked correctly at 1.
#[pyfunction]
fn hit_at_1(rankings: Vec<(Vec<usize>, Vec<f64>, usize)>) -> PyResult<f64> {
    let rs: Vec<Ranking> = rankings
        .into_iter()
        .map(|(candidates, scores, truth)| Ranking {
            candidates,
            scores,
            truth,
        })
        .collect();
    eval::hit_at_1(&rs).map_err(err)
}

/// Curriculum weight of the text-only loss at step `i`.
#[pyfunction]
#[pyo3(signature = (i, z, tau=0.125))]
fn beta(i: usize, z: usize, tau: f64) -> PyResult<f64> {
    Ok(BetaSchedule::new(tau, z).map_err(err)?.beta(i))
}

#[pymodule]
fn ckf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(build_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train_cf, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(export_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(hit_at_1, m)?)?;
    m.add_function(wrap_pyfunction!(beta, m)?)?;
    Ok(())
}
