//! Offline experiments that run real `quine` process trees against the
//! scripted mock provider and check structural outcomes from their traces.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::env_vars;
use crate::error::{Error, Result};
use crate::guest::MockScript;
use crate::tools::{self, EnvMap, ProcessStatus};

mod fractal;
mod library;
mod pipelines;
mod streaming;

pub use fractal::{fractal_script, predicted_shape, run_fractal_experiment, FractalPlan, FractalReport};
pub use library::{
    generate_library, hex_name, shelf_name, volume_name, LibraryManifest, LibrarySpec, VolumeAddress,
    LINES_PER_VOLUME,
};
pub use pipelines::{run_pipelines_experiment, PipelinesReport, PipelinesSpec};
pub use streaming::{generate_stream, run_streaming_experiment, streaming_script, StreamReport, StreamSpec};

/// Where experiments find the runtime and keep their files.
#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub quine_bin: PathBuf,
    pub work_dir: PathBuf,
    /// Wall-clock limit for one root process (and its tree).
    pub timeout: Duration,
}

impl HarnessConfig {
    pub fn new(quine_bin: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        HarnessConfig {
            quine_bin: quine_bin.into(),
            work_dir: work_dir.into(),
            timeout: Duration::from_secs(60),
        }
    }

    /// Fresh subdirectory of the work dir for one experiment.
    pub(crate) fn experiment_dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.work_dir.join(name);
        if d.exists() {
            std::fs::remove_dir_all(&d)?;
        }
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }
}

/// The `quine` executable next to the running one.
pub fn sibling_quine() -> Result<PathBuf> {
    let me = std::env::current_exe()?;
    let p = me.with_file_name("quine");
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Usage(format!("no quine executable at {}", p.display())))
    }
}

/// Single-quotes `s` for /bin/sh.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

pub(crate) fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Environment for a mock-driven tree: the harness's own environment with
/// every inherited `QUINE_*` variable removed.
pub(crate) fn mock_env(script: &Path, trace_dir: &Path, max_turns: u32) -> EnvMap {
    let mut env = tools::current_env();
    env.retain(|k, _| !k.to_string_lossy().starts_with("QUINE_"));
    env.insert(env_vars::PROVIDER.into(), "mock".into());
    env.insert(env_vars::MOCK_SCRIPT.into(), script.into());
    env.insert(env_vars::TRACE_DIR.into(), trace_dir.into());
    env.insert(env_vars::MAX_TURNS.into(), max_turns.to_string().into());
    env
}

pub(crate) fn install_script(dir: &Path, script: &MockScript) -> Result<PathBuf> {
    let p = dir.join("mock.json");
    script.write(&p)?;
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub pid: u32,
    pub status: ProcessStatus,
    pub stdout: Vec<u8>,
    pub stderr: String,
    pub timed_out: bool,
    pub duration: Duration,
}

/// Runs `program args` with `stdin` piped in, killing it after `timeout`.
pub(crate) fn run_process(
    program: &Path,
    args: &[OsString],
    env: &EnvMap,
    stdin: Option<Vec<u8>>,
    timeout: Duration,
) -> Result<RunOutput> {
    let start = Instant::now();
    let mut child = Command::new(program)
        .args(args)
        .env_clear()
        .envs(env)
        .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| Error::SpawnFailure {
            what: program.display().to_string(),
            source,
        })?;
    let writer = child.stdin.take().zip(stdin).map(|(mut w, bytes)| {
        thread::spawn(move || {
            let _ = w.write_all(&bytes);
        })
    });
    let mut out = child.stdout.take().expect("piped");
    let mut err = child.stderr.take().expect("piped");
    let out_t = thread::spawn(move || {
        let mut b = Vec::new();
        let _ = out.read_to_end(&mut b);
        b
    });
    let err_t = thread::spawn(move || {
        let mut b = Vec::new();
        let _ = err.read_to_end(&mut b);
        b
    });

    let (tx, rx) = mpsc::channel::<()>();
    let pid = child.id();
    let watchdog = thread::spawn(move || {
        if rx.recv_timeout(timeout).is_err() {
            unsafe { libc::kill(pid as i32, libc::SIGKILL) };
            return true;
        }
        false
    });
    let status = child.wait()?;
    let _ = tx.send(());
    let timed_out = watchdog.join().unwrap_or(false);
    if let Some(w) = writer {
        let _ = w.join();
    }
    let stdout = out_t.join().unwrap_or_default();
    let stderr = String::from_utf8_lossy(&err_t.join().unwrap_or_default()).into_owned();
    Ok(RunOutput {
        pid,
        status: status.into(),
        stdout,
        stderr,
        timed_out,
        duration: start.elapsed(),
    })
}

/// Runs one `quine` root with `mission` as a single argv word.
pub(crate) fn run_quine(cfg: &HarnessConfig, env: &EnvMap, mission: &str, stdin: Option<Vec<u8>>) -> Result<RunOutput> {
    let args = [OsString::from("--"), OsString::from(mission)];
    run_process(&cfg.quine_bin, &args, env, stdin, cfg.timeout)
}

/// Runs a /bin/sh pipeline string.
pub(crate) fn run_shell(script: &str, env: &EnvMap, timeout: Duration) -> Result<RunOutput> {
    run_process(
        Path::new("/bin/sh"),
        &[OsString::from("-c"), OsString::from(script)],
        env,
        None,
        timeout,
    )
}

/// One named boolean check inside a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentReport {
    Fractal(FractalReport),
    Streaming(StreamReport),
    Pipelines(PipelinesReport),
}

impl ExperimentReport {
    pub fn checks(&self) -> &[Check] {
        match self {
            ExperimentReport::Fractal(r) => &r.checks,
            ExperimentReport::Streaming(r) => &r.checks,
            ExperimentReport::Pipelines(r) => &r.checks,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentReport::Fractal(_) => "fractal",
            ExperimentReport::Streaming(_) => "streaming",
            ExperimentReport::Pipelines(_) => "pipelines",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// Human-readable summary, one line per check.
    pub fn summary(&self) -> String {
        let mut s = format!("{} experiment: {}\n", self.name(), if self.passed() { "PASS" } else { "FAIL" });
        for c in self.checks() {
            let _ = writeln!(s, "  [{}] {}: {}", if c.passed { "ok" } else { "!!" }, c.name, c.detail);
        }
        s
    }
}
