//! Python bindings: missions, wisdom, prompt assembly, tool-call decoding,
//! one-shot `sh` execution and trace reading.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::os::fd::OwnedFd;
use std::path::PathBuf;
use std::thread;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use quine::protocol::{self, ChannelSet};
use quine::tools::{self, Limits, ProcessStatus, ShCall, ToolCall};

fn value_err(e: quine::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn os_err(e: impl std::fmt::Display) -> PyErr {
    PyOSError::new_err(e.to_string())
}

/// Parses a JSON document with Python's `json` module.
fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn status_to_py<'py>(py: Python<'py>, status: ProcessStatus) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    match status {
        ProcessStatus::Exited(c) => d.set_item("exited", c)?,
        ProcessStatus::Signaled(s) => d.set_item("signaled", s)?,
    }
    Ok(d)
}

#[pyclass(name = "Mission", frozen)]
struct PyMission {
    inner: protocol::Mission,
}

#[pymethods]
impl PyMission {
    #[new]
    fn new(text: String) -> PyResult<Self> {
        Ok(PyMission {
            inner: protocol::Mission::new(text).map_err(value_err)?,
        })
    }

    /// Joins argv words with single spaces.
    #[staticmethod]
    fn from_words(words: Vec<String>) -> PyResult<Self> {
        Ok(PyMission {
            inner: protocol::Mission::from_words(&words).map_err(value_err)?,
        })
    }

    #[getter]
    fn text(&self) -> &str {
        self.inner.as_str()
    }

    fn __str__(&self) -> &str {
        self.inner.as_str()
    }

    fn __repr__(&self) -> String {
        format!("Mission({:?})", self.inner.as_str())
    }
}

#[pyclass(name = "WisdomMap")]
struct PyWisdomMap {
    inner: protocol::WisdomMap,
}

#[pymethods]
impl PyWisdomMap {
    #[new]
    #[pyo3(signature = (entries=None, generation=0))]
    fn new(entries: Option<BTreeMap<String, String>>, generation: u64) -> PyResult<Self> {
        Ok(PyWisdomMap {
            inner: protocol::WisdomMap::from_entries(entries.unwrap_or_default(), generation).map_err(value_err)?,
        })
    }

    /// Decodes `QUINE_WISDOM_*` and `QUINE_GENERATION` from an environment mapping.
    #[staticmethod]
    fn from_env(env: BTreeMap<String, String>) -> Self {
        PyWisdomMap {
            inner: protocol::WisdomMap::from_env(env),
        }
    }

    fn insert(&mut self, key: String, value: String) -> PyResult<()> {
        self.inner.insert(key, value).map_err(value_err)
    }

    fn get(&self, key: &str) -> Option<String> {
        self.inner.get(key).map(str::to_string)
    }

    fn entries(&self) -> BTreeMap<String, String> {
        self.inner.entries().clone()
    }

    #[getter]
    fn generation(&self) -> u64 {
        self.inner.generation()
    }

    /// The map a successful exec would hand to the next generation.
    fn successor(&self, updates: &PyWisdomMap) -> Self {
        PyWisdomMap {
            inner: self.inner.successor(&updates.inner),
        }
    }

    fn to_env(&self) -> BTreeMap<String, String> {
        self.inner.to_env().into_iter().collect()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn __len__(&self) -> usize {
        self.inner.entries().len()
    }

    fn __eq__(&self, other: &PyWisdomMap) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("WisdomMap({:?}, generation={})", self.inner.entries(), self.inner.generation())
    }
}

/// The system message for a mission and wisdom map.
#[pyfunction]
fn system_prompt(mission: &PyMission, wisdom: &PyWisdomMap) -> String {
    protocol::system_prompt(&mission.inner, &wisdom.inner)
}

/// Digest of the system message, as recorded in traces.
#[pyfunction]
fn system_digest(mission: &PyMission, wisdom: &PyWisdomMap) -> String {
    protocol::Message::system(protocol::system_prompt(&mission.inner, &wisdom.inner)).digest()
}

/// Names of the four tools, in schema order.
#[pyfunction]
fn tool_names() -> Vec<String> {
    quine::guest::tool_schemas().into_iter().map(|s| s.name).collect()
}

/// Validates one tool call and returns it as a dict. Raises ValueError on
/// unknown tools, unknown fields or out-of-range values.
#[pyfunction]
fn decode_tool_call<'py>(py: Python<'py>, name: &str, arguments: &str) -> PyResult<Bound<'py, PyDict>> {
    let call = protocol::decode_tool_call(name, arguments).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("tool", call.name())?;
    match call {
        ToolCall::Sh(sh) => {
            d.set_item("command", sh.command)?;
            d.set_item("timeout_s", sh.timeout_s)?;
        }
        ToolCall::Fork(f) => {
            let children = PyList::empty(py);
            for c in f.children {
                let child = PyDict::new(py);
                child.set_item("argv", c.mission.as_str())?;
                child.set_item("stdin", c.material)?;
                children.append(child)?;
            }
            d.set_item("children", children)?;
            d.set_item("wait", f.wait)?;
        }
        ToolCall::Exec(e) => d.set_item("wisdom", e.wisdom.entries().clone())?,
        ToolCall::Exit(x) => {
            d.set_item("status", x.status)?;
            d.set_item("message", x.message)?;
        }
    }
    Ok(d)
}

fn drain(reader: io::PipeReader) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut r = reader;
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        buf
    })
}

/// Runs one `sh` tool call. `material` is readable on fd 3; fd 4 and fd 5
/// writes come back as `deliverable` and `diagnostics`.
#[pyfunction]
#[pyo3(signature = (command, material=None, timeout_s=None))]
fn run_sh<'py>(
    py: Python<'py>,
    command: String,
    material: Option<Vec<u8>>,
    timeout_s: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let (material_r, mut material_w) = io::pipe().map_err(os_err)?;
    let (deliverable_r, deliverable_w) = io::pipe().map_err(os_err)?;
    let (diagnostics_r, diagnostics_w) = io::pipe().map_err(os_err)?;
    let channels = ChannelSet::from_fds(
        OwnedFd::from(material_r),
        OwnedFd::from(deliverable_w),
        OwnedFd::from(diagnostics_w),
    )
    .map_err(os_err)?;
    let feeder = thread::spawn(move || {
        if let Some(bytes) = material {
            let _ = material_w.write_all(&bytes);
        }
    });
    let (deliverable, diagnostics) = (drain(deliverable_r), drain(diagnostics_r));
    let call = ShCall { command, timeout_s };
    let result = py.detach(|| tools::run_sh(&call, &channels, &tools::current_env(), &Limits::default()));
    drop(channels);
    let _ = feeder.join();
    let deliverable = deliverable.join().unwrap_or_default();
    let diagnostics = diagnostics.join().unwrap_or_default();
    let res = result.map_err(os_err)?;

    let d = PyDict::new(py);
    d.set_item("status", status_to_py(py, res.status)?)?;
    d.set_item("exit_status", res.status.code())?;
    d.set_item("stdout", res.stdout)?;
    d.set_item("stderr", res.stderr)?;
    d.set_item("stdout_truncated", res.stdout_truncated)?;
    d.set_item("stderr_truncated", res.stderr_truncated)?;
    d.set_item("timed_out", res.timed_out)?;
    d.set_item("duration_ms", res.duration_ms)?;
    d.set_item("deliverable", String::from_utf8_lossy(&deliverable))?;
    d.set_item("diagnostics", String::from_utf8_lossy(&diagnostics))?;
    Ok(d)
}

/// Records of one `.qtrace` file as a list of dicts. Corrupt lines are skipped.
#[pyfunction]
fn read_trace<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let tf = quine::trace::read_trace(&path).map_err(os_err)?;
    json_to_py(py, &serde_json::to_string(&tf.records).map_err(os_err)?)
}

/// The process tree reconstructed from a trace directory, as a dict.
#[pyfunction]
fn process_tree<'py>(py: Python<'py>, trace_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let tree = quine::trace::reconstruct_tree(&trace_dir).map_err(os_err)?;
    let tree_json = serde_json::to_value(&tree).map_err(os_err)?;
    let summary = serde_json::json!({
        "sessions": tree.session_count(),
        "depth": tree.depth(),
        "level_sizes": tree.level_sizes(),
        "tree": tree_json,
    });
    json_to_py(py, &summary.to_string())
}

/// The pid encoded in a session id, if well formed.
#[pyfunction]
fn session_pid(session_id: &str) -> Option<u32> {
    quine::trace::session_pid(session_id)
}

#[pymodule]
fn quine_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMission>()?;
    m.add_class::<PyWisdomMap>()?;
    m.add_function(wrap_pyfunction!(system_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(system_digest, m)?)?;
    m.add_function(wrap_pyfunction!(tool_names, m)?)?;
    m.add_function(wrap_pyfunction!(decode_tool_call, m)?)?;
    m.add_function(wrap_pyfunction!(run_sh, m)?)?;
    m.add_function(wrap_pyfunction!(read_trace, m)?)?;
    m.add_function(wrap_pyfunction!(process_tree, m)?)?;
    m.add_function(wrap_pyfunction!(session_pid, m)?)?;
    m.add("EXIT_USAGE", quine::host::EXIT_USAGE)?;
    m.add("EXIT_TURN_BUDGET", quine::host::EXIT_TURN_BUDGET)?;
    m.add("EXIT_PROVIDER", quine::host::EXIT_PROVIDER)?;
    Ok(())
}
