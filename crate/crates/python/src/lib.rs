//! Python bindings: tokenizer, simulator, error metric, correlation, tensor
//! and checkpoint readers, the pipeline runner and the protocol
//! conformance suite.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use picl_core::physics::SystemKind;
use picl_core::pipeline::{Pipeline, RunOptions, Stage, StageStatus};
use picl_core::tokenizer::ScalingParams;

fn py_err(e: picl_core::Error) -> PyErr {
    match e {
        picl_core::Error::Io { .. } | picl_core::Error::StdIo(_) => PyIOError::new_err(e.to_string()),
        picl_core::Error::Protocol { .. } | picl_core::Error::Divergence { .. } | picl_core::Error::NonFiniteLoss { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn system(kind: &str) -> PyResult<SystemKind> {
    kind.parse().map_err(py_err)
}

/// Affine scaling fitted on one series.
#[pyclass(frozen, get_all, from_py_object, module = "picl")]
#[derive(Clone)]
struct Scaling {
    a: f64,
    b: f64,
    alpha: f64,
    beta: f64,
}

#[pymethods]
impl Scaling {
    #[new]
    #[pyo3(signature = (a=1.0, b=0.0, alpha=0.99, beta=0.3))]
    fn new(a: f64, b: f64, alpha: f64, beta: f64) -> Self {
        Scaling { a, b, alpha, beta }
    }

    fn __repr__(&self) -> String {
        format!("Scaling(a={}, b={}, alpha={}, beta={})", self.a, self.b, self.alpha, self.beta)
    }
}

impl Scaling {
    fn params(&self) -> ScalingParams {
        ScalingParams {
            alpha: self.alpha,
            beta: self.beta,
            a: self.a,
            b: self.b,
            degenerate: false,
        }
    }
}

/// Fits the percentile scaling of `series`.
#[pyfunction]
#[pyo3(signature = (series, alpha=0.99, beta=0.3))]
fn fit_scaling(series: Vec<f64>, alpha: f64, beta: f64) -> PyResult<Scaling> {
    let p = picl_core::tokenizer::fit_scaling(&series, alpha, beta).map_err(py_err)?;
    Ok(Scaling {
        a: p.a,
        b: p.b,
        alpha: p.alpha,
        beta: p.beta,
    })
}

/// Digit string of `series` under `scaling`, e.g. `"-1348,-740"`.
#[pyfunction]
#[pyo3(signature = (series, scaling=None, precision=3))]
fn serialize(series: Vec<f64>, scaling: Option<Scaling>, precision: u32) -> PyResult<String> {
    let params = scaling.map_or_else(ScalingParams::identity, |s| s.params());
    Ok(picl_core::tokenizer::serialize(&series, &params, precision).map_err(py_err)?.text)
}

/// Inverse of `serialize`.
#[pyfunction]
#[pyo3(signature = (text, scaling=None, precision=3))]
fn parse(text: &str, scaling: Option<Scaling>, precision: u32) -> PyResult<Vec<f64>> {
    let params = scaling.map_or_else(ScalingParams::identity, |s| s.params());
    picl_core::tokenizer::parse_text(text, &params, precision).map_err(py_err)
}

/// `|pred - truth| / (|pred| + |truth|)`.
#[pyfunction]
fn bounded_relative_error(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    picl_core::forecast::bounded_relative_error(&pred, &truth).map_err(py_err)
}

/// Pearson correlation; `None` when either series is constant.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<Option<f64>> {
    picl_core::correlation::pearson(&x, &y).map_err(py_err)
}

/// A simulated trajectory as plain lists.
#[pyclass(frozen, get_all, module = "picl")]
struct Trajectory {
    channels: Vec<String>,
    /// One row per state, one column per channel.
    states: Vec<Vec<f64>>,
    times: Vec<f64>,
    total_energy: Vec<f64>,
    kinetic_energy: Vec<f64>,
    potential_energy: Vec<f64>,
}

/// Simulates a randomly drawn `mass_spring` or `pendulum` system.
#[pyfunction]
#[pyo3(signature = (kind, seed, n_states, dt=0.1))]
fn simulate(py: Python<'_>, kind: &str, seed: u64, n_states: usize, dt: f64) -> PyResult<Trajectory> {
    let kind = system(kind)?;
    let traj = py
        .detach(|| picl_core::physics::simulate(seed, kind, &picl_core::physics::SamplingRanges::default(), dt, n_states))
        .map_err(py_err)?;
    let energies = traj.energies().map_err(py_err)?;
    let n_channels = kind.n_channels();
    Ok(Trajectory {
        channels: kind.channel_names(),
        states: traj
            .states
            .iter()
            .map(|s| (0..n_channels).map(|c| picl_core::physics::channel_value(s, c)).collect())
            .collect(),
        times: traj.states.iter().map(|s| s.time).collect(),
        total_energy: energies.iter().map(|e| e.total).collect(),
        kinetic_energy: energies.iter().map(|e| e.kinetic).collect(),
        potential_energy: energies.iter().map(|e| e.potential).collect(),
    })
}

/// Residual-stream tensor read from a `.picl` file.
#[pyclass(frozen, get_all, module = "picl")]
struct Tensor {
    block_index: u32,
    context_length: u32,
    seq_len: u32,
    hidden_dim: u32,
    /// Row-major `seq_len x hidden_dim`.
    data: Vec<f32>,
    trajectory_id: String,
    channel: String,
}

#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<Tensor> {
    let t = picl_core::activation::read_tensor(&path).map_err(py_err)?;
    Ok(Tensor {
        block_index: t.block_index,
        context_length: t.context_length,
        seq_len: t.seq_len,
        hidden_dim: t.hidden_dim,
        data: t.data,
        trajectory_id: t.provenance.trajectory_id,
        channel: t.provenance.channel,
    })
}

/// A trained sparse autoencoder loaded from a checkpoint.
#[pyclass(frozen, module = "picl")]
struct Sae {
    params: picl_core::sae::SaeParams<f32>,
}

#[pymethods]
impl Sae {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Sae {
            params: picl_core::sae::load_checkpoint(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.params.input_dim
    }

    #[getter]
    fn code_dim(&self) -> usize {
        self.params.code_dim()
    }

    fn encode(&self, x: Vec<f32>) -> PyResult<Vec<f32>> {
        self.params.encode(&x).map_err(py_err)
    }

    fn decode(&self, code: Vec<f32>) -> PyResult<Vec<f32>> {
        self.params.decode(&code).map_err(py_err)
    }
}

/// Runs pipeline stages from a config file. Returns the status of every
/// selected stage and the manifest path.
#[pyfunction]
#[pyo3(signature = (config, stages=None, jobs=0, force=false, seed_override=None))]
fn run_pipeline(
    py: Python<'_>,
    config: PathBuf,
    stages: Option<Vec<String>>,
    jobs: usize,
    force: bool,
    seed_override: Option<u64>,
) -> PyResult<(BTreeMap<String, String>, Option<String>)> {
    let stages: Vec<Stage> = match stages {
        Some(names) => names.iter().map(|s| s.parse()).collect::<picl_core::Result<_>>().map_err(py_err)?,
        None => Stage::ALL.to_vec(),
    };
    let options = RunOptions {
        jobs,
        force,
        seed_override,
    };
    let summary = py
        .detach(|| Pipeline::from_file(&config, options).and_then(|p| p.run(&stages)))
        .map_err(py_err)?;
    let statuses = summary
        .outcomes
        .iter()
        .map(|o| {
            let status = match &o.status {
                StageStatus::Ran => "ran".to_owned(),
                StageStatus::Skipped => "skipped".to_owned(),
                StageStatus::Failed(e) => format!("failed: {e}"),
                StageStatus::Blocked(d) => format!("blocked by {d}"),
            };
            (o.stage.name().to_owned(), status)
        })
        .collect();
    Ok((statuses, summary.manifest.map(|m| m.to_string_lossy().into_owned())))
}

/// Runs the wire-protocol conformance suite against `endpoint`. Returns
/// `(check, passed, detail)` triples.
#[pyfunction]
fn conformance(py: Python<'_>, endpoint: &str, scratch: PathBuf) -> PyResult<Vec<(String, bool, String)>> {
    let report = py
        .detach(|| {
            std::fs::create_dir_all(&scratch).map_err(picl_core::Error::from)?;
            picl_core::protocol::open_transport(endpoint)
                .map(|t| picl_core::protocol::conformance::run_conformance(t, &scratch))
        })
        .map_err(py_err)?;
    Ok(report.checks.into_iter().map(|c| (c.name.to_owned(), c.passed, c.detail)).collect())
}

#[pymodule]
#[pyo3(name = "picl")]
fn picl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scaling>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<Tensor>()?;
    m.add_class::<Sae>()?;
    m.add_function(wrap_pyfunction!(fit_scaling, m)?)?;
    m.add_function(wrap_pyfunction!(serialize, m)?)?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(bounded_relative_error, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(conformance, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
