//! Python bindings. Configs go in as JSON strings or plain Python objects;
//! results come back as Python dicts and lists.

use std::path::{Path, PathBuf};

use emvlab::accessibility::{run_access, write_access_outputs, AccessParams};
use emvlab::harness::{self, MatrixSpec, Scenario, ScenarioRef, TrainJob};
use emvlab::network::{save_network, GridSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Accept a JSON string or any `json.dumps`-able object.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj
            .py()
            .import("json")?
            .call_method1("dumps", (obj,))?
            .extract()?,
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Grid network as a dict; also written to `path` when given.
#[pyfunction]
#[pyo3(signature = (rows, cols, link_m=200.0, lanes=2, ec_ratio=0.0, path=None))]
fn grid_network(
    py: Python<'_>,
    rows: usize,
    cols: usize,
    link_m: f64,
    lanes: usize,
    ec_ratio: f64,
    path: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let spec = GridSpec {
        link_length: link_m,
        lanes,
        ec_ratio,
        ..GridSpec::new(rows, cols)
    };
    let net = spec.build().map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(p) = &path {
        save_network(&net, p).map_err(runtime)?;
    }
    to_py(py, net.to_file())
}

/// Builtin scenario (`grid3x3-smoke`, `grid5x5-config1`..`4`).
#[pyfunction]
#[pyo3(signature = (name, od_seed=0))]
fn builtin_scenario(py: Python<'_>, name: String, od_seed: u64) -> PyResult<Py<PyAny>> {
    let (s, _) = ScenarioRef::Builtin {
        builtin: name,
        od_seed,
    }
    .load(Path::new("."))
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &s)
}

/// Run every repetition of a scenario; one metrics dict per repetition.
#[pyfunction]
#[pyo3(signature = (scenario, base_dir=PathBuf::from(".")))]
fn simulate(py: Python<'_>, scenario: &Bound<'_, PyAny>, base_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let scenario: Scenario = from_py(scenario)?;
    let runs = py
        .detach(|| harness::simulate(&scenario, &base_dir, false))
        .map_err(runtime)?;
    let rows: Vec<_> = runs.into_iter().map(|(row, _)| row).collect();
    to_py(py, &rows)
}

/// Benchmark matrix; returns `{"rows": [...], "table": str}`.
#[pyfunction]
#[pyo3(signature = (matrix, base_dir=PathBuf::from(".")))]
fn run_matrix(py: Python<'_>, matrix: &Bound<'_, PyAny>, base_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let spec: MatrixSpec = from_py(matrix)?;
    let table = py
        .detach(|| harness::run_matrix(&spec, &base_dir))
        .map_err(runtime)?;
    #[derive(Serialize)]
    struct Out<'a> {
        rows: &'a [harness::SummaryRow],
        table: String,
    }
    to_py(
        py,
        &Out {
            rows: &table.rows,
            table: table.to_text(),
        },
    )
}

/// Train agents; checkpoints and the learning curve go to `out_dir`.
/// Returns the per-episode log.
#[pyfunction]
#[pyo3(signature = (job, out_dir, base_dir=PathBuf::from(".")))]
fn train(py: Python<'_>, job: &Bound<'_, PyAny>, out_dir: PathBuf, base_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let job: TrainJob = from_py(job)?;
    let out = py.detach(|| job.run(&base_dir, &out_dir)).map_err(runtime)?;
    to_py(py, &out.curve)
}

/// Accessibility analysis of a graph directory. Returns coverage curves per
/// facility kind; also writes the CSV outputs when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (graph_dir, alpha=15.0, tau=240.0, out_dir=None))]
fn access_run(
    py: Python<'_>,
    graph_dir: PathBuf,
    alpha: f64,
    tau: f64,
    out_dir: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let params = AccessParams::new(alpha, tau);
    let (graph, res) = py.detach(|| run_access(&graph_dir, &params)).map_err(runtime)?;
    if let Some(dir) = &out_dir {
        write_access_outputs(&graph, &res, dir).map_err(runtime)?;
    }
    #[derive(Serialize)]
    struct Out<'a> {
        taus: &'a [f64],
        coverage: std::collections::BTreeMap<&'static str, &'a [f64]>,
        underserved_population: std::collections::BTreeMap<&'static str, f64>,
    }
    let out = Out {
        taus: &res.taus,
        coverage: res
            .kinds
            .iter()
            .zip(&res.coverage)
            .map(|(k, c)| (k.label(), c.as_slice()))
            .collect(),
        underserved_population: res
            .kinds
            .iter()
            .zip(&res.reports)
            .map(|(k, r)| (k.label(), r.underserved))
            .collect(),
    };
    to_py(py, &out)
}

#[pymodule]
fn emvlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(grid_network, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(access_run, m)?)?;
    Ok(())
}
