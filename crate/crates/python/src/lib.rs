//! Python bindings: graphs, features, synthetic data, the stage pipeline
//! and trained checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mahgnn_core::checkpoint::ModelCheckpoint;
use mahgnn_core::features::{feature_matrix, Standardizer, FEATURE_NAMES};
use mahgnn_core::heig::{classify_triplet as classify, relation_stats, AccountType, Heig, InteractionType};
use mahgnn_core::io::{read_graph, write_graph};
use mahgnn_core::pipeline::{evaluate_checkpoint, run_stage, Overrides, PipelineConfig, Stage};
use mahgnn_core::synthgen::{generate, SynthSpec};
use mahgnn_core::trainer;

create_exception!(mahgnn, MahgnnError, PyException);
create_exception!(mahgnn, MissingUpstreamError, MahgnnError);

fn to_py(err: mahgnn_core::Error) -> PyErr {
    let msg = format!("{}: {err}", err.kind());
    match err {
        mahgnn_core::Error::MissingUpstream(_) => MissingUpstreamError::new_err(msg),
        _ => MahgnnError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr<Err: std::fmt::Display>>(s: &str) -> PyResult<T> {
    s.parse().map_err(|e: T::Err| MahgnnError::new_err(e.to_string()))
}

/// Relation name of a `(source kind, interaction, target kind)` triplet.
#[pyfunction]
fn classify_triplet(src: &str, kind: &str, dst: &str) -> PyResult<String> {
    let r = classify(parse::<AccountType>(src)?, parse::<InteractionType>(kind)?, parse::<AccountType>(dst)?)
        .map_err(to_py)?;
    Ok(r.to_string())
}

/// Micro-F1 of boolean predictions.
#[pyfunction]
fn micro_f1(predictions: Vec<bool>, labels: Vec<bool>) -> PyResult<f64> {
    if predictions.len() != labels.len() {
        return Err(MahgnnError::new_err("predictions and labels differ in length"));
    }
    trainer::micro_f1(&predictions, &labels).map_err(to_py)
}

#[pyfunction]
fn feature_names() -> Vec<&'static str> {
    FEATURE_NAMES.to_vec()
}

/// A heterogeneous interaction graph.
#[pyclass(module = "mahgnn", frozen)]
struct Graph {
    inner: Heig,
}

#[pymethods]
impl Graph {
    /// Reads `accounts.csv` and `edges.csv` from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Graph { inner: read_graph(&dir).map_err(to_py)? })
    }

    /// Generates a synthetic graph; `spec` is a TOML synthetic spec.
    #[staticmethod]
    #[pyo3(signature = (spec=None, seed=None))]
    fn synthetic(spec: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut spec = match spec {
            Some(text) => SynthSpec::from_toml(text).map_err(to_py)?,
            None => SynthSpec::default(),
        };
        if let Some(seed) = seed {
            spec.seed = seed;
        }
        Ok(Graph { inner: generate(&spec).map_err(to_py)?.graph })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(|e| MahgnnError::new_err(e.to_string()))?;
        write_graph(&dir, &self.inner).map_err(to_py)
    }

    /// Account ids of one kind (`"ca"` or `"eoa"`) in row order.
    fn ids(&self, kind: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.ids(parse(kind)?).to_vec())
    }

    fn num_accounts(&self, kind: &str) -> PyResult<usize> {
        Ok(self.inner.count(parse(kind)?))
    }

    fn num_edges(&self) -> usize {
        self.inner.edges().len()
    }

    /// Labels of the labeled contracts.
    fn labels(&self) -> BTreeMap<String, bool> {
        self.inner
            .accounts()
            .filter_map(|a| a.label.map(|l| (a.id.clone(), l)))
            .collect()
    }

    /// `CA`, `EOA` and per-relation edge counts.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = relation_stats(&self.inner);
        let d = PyDict::new(py);
        d.set_item("CA", s.ca)?;
        d.set_item("EOA", s.eoa)?;
        for r in mahgnn_core::TripletRelation::ALL {
            d.set_item(r.to_string(), s.get(r))?;
        }
        Ok(d)
    }

    /// Feature rows of one account kind; standardized with statistics fit
    /// on this graph when `standardized` is true.
    #[pyo3(signature = (kind, standardized=false))]
    fn features(&self, kind: &str, standardized: bool) -> PyResult<Vec<Vec<f64>>> {
        let kind: AccountType = parse(kind)?;
        let m = if standardized {
            let raw = AccountType::ALL.map(|k| feature_matrix(&self.inner, k));
            Standardizer::fit(&raw).apply(kind, &raw[kind.index()])
        } else {
            feature_matrix(&self.inner, kind)
        };
        Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(ca={}, eoa={}, edges={})",
            self.inner.count(AccountType::Ca),
            self.inner.count(AccountType::Eoa),
            self.inner.edges().len()
        )
    }
}

fn manifest_dict<'py>(py: Python<'py>, m: &mahgnn_core::pipeline::Manifest) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("stage", &m.stage)?;
    d.set_item("version", &m.version)?;
    d.set_item("seed", m.seed)?;
    d.set_item("config_hash", &m.config_hash)?;
    d.set_item("inputs", m.inputs.clone())?;
    d.set_item("outputs", m.outputs.clone())?;
    Ok(d)
}

/// The stage pipeline over a work directory.
#[pyclass(module = "mahgnn", frozen)]
struct Pipeline {
    config: PipelineConfig,
}

#[pymethods]
impl Pipeline {
    /// `config` is TOML text; `workdir` and `seed` override it.
    #[new]
    #[pyo3(signature = (config=None, workdir=None, seed=None))]
    fn new(config: Option<&str>, workdir: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        let mut config = match config {
            Some(text) => PipelineConfig::from_toml(text).map_err(to_py)?,
            None => PipelineConfig::default(),
        };
        if let Some(dir) = workdir {
            config.paths.workdir = dir;
        }
        if seed.is_some() {
            config.seed = seed;
        }
        Ok(Pipeline { config })
    }

    /// Runs one stage by name and returns its manifest.
    fn run_stage<'py>(&self, py: Python<'py>, stage: &str) -> PyResult<Bound<'py, PyDict>> {
        let stage: Stage = parse(stage)?;
        let mut cfg = self.config.clone();
        if stage == Stage::Synth && cfg.synth.is_none() {
            cfg.synth = Some(SynthSpec::default());
        }
        let manifest = py.detach(|| run_stage(stage, &cfg, &Overrides::default())).map_err(to_py)?;
        manifest_dict(py, &manifest)
    }

    #[getter]
    fn workdir(&self) -> PathBuf {
        self.config.paths.workdir.clone()
    }

    fn config_toml(&self) -> String {
        self.config.to_toml()
    }
}

/// Trained models of every run, with what is needed to rebuild their inputs.
#[pyclass(module = "mahgnn", frozen)]
struct Checkpoint {
    inner: ModelCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint { inner: ModelCheckpoint::load(&path).map_err(to_py)? })
    }

    fn runs(&self) -> usize {
        self.inner.models.len()
    }

    /// Per-run test Micro-F1 stored at training time.
    fn test_f1(&self) -> Vec<f64> {
        self.inner.report.test_f1.clone()
    }

    /// Per-run test Micro-F1 recomputed on `graph`.
    fn evaluate(&self, py: Python<'_>, graph: &Graph) -> PyResult<Vec<f64>> {
        let report = py.detach(|| evaluate_checkpoint(&graph.inner, &self.inner)).map_err(to_py)?;
        Ok(report.test_f1)
    }

    fn report_json(&self) -> String {
        self.inner.report.to_json()
    }
}

#[pymodule]
fn mahgnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MahgnnError", m.py().get_type::<MahgnnError>())?;
    m.add("MissingUpstreamError", m.py().get_type::<MissingUpstreamError>())?;
    m.add_function(wrap_pyfunction!(classify_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(micro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_class::<Graph>()?;
    m.add_class::<Pipeline>()?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
