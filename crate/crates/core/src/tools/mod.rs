//! The four tools: `sh`, `fork`, `exec` and `exit`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::os::unix::process::ExitStatusExt;
use std::process::ExitStatus;

use serde::{Deserialize, Serialize};

use crate::protocol::{Mission, WisdomMap};

mod capture;
mod fork;
mod lifecycle;
mod sh;

pub use fork::{child_environment, do_fork, poll_job, ChildOutcome, ForkOutput, JobHandle, JobPoll, JobTable, SPAWN_FAILURE_STATUS};
pub use lifecycle::{do_exec, do_exit, exec_environment, prepare_exit, ExecPlan};
pub use sh::{run_sh, ShResult};

/// Process environment as handed to children.
pub type EnvMap = BTreeMap<OsString, OsString>;

pub fn current_env() -> EnvMap {
    std::env::vars_os().collect()
}

/// Capture limits and defaults for tool execution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Limits {
    pub sh_stream_cap: usize,
    pub deliverable_cap: usize,
    pub diagnostics_tail: usize,
    pub default_timeout_s: u64,
    pub max_fork_children: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            sh_stream_cap: 64 * 1024,
            deliverable_cap: 256 * 1024,
            diagnostics_tail: 8 * 1024,
            default_timeout_s: 120,
            max_fork_children: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShCall {
    pub command: String,
    pub timeout_s: Option<u64>,
}

impl ShCall {
    pub fn new(command: impl Into<String>) -> Self {
        ShCall {
            command: command.into(),
            timeout_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildSpec {
    pub mission: Mission,
    /// Text piped to the child's stdin; `None` attaches `/dev/null`.
    pub material: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForkCall {
    pub children: Vec<ChildSpec>,
    pub wait: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecCall {
    pub wisdom: WisdomMap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitCall {
    pub status: u8,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolCall {
    Sh(ShCall),
    Fork(ForkCall),
    Exec(ExecCall),
    Exit(ExitCall),
}

impl ToolCall {
    pub fn name(&self) -> &'static str {
        match self {
            ToolCall::Sh(_) => "sh",
            ToolCall::Fork(_) => "fork",
            ToolCall::Exec(_) => "exec",
            ToolCall::Exit(_) => "exit",
        }
    }
}

/// How a process ended: a normal exit code or a terminating signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessStatus {
    Exited(u8),
    Signaled(i32),
}

impl ProcessStatus {
    pub fn code(self) -> Option<u8> {
        match self {
            ProcessStatus::Exited(c) => Some(c),
            ProcessStatus::Signaled(_) => None,
        }
    }

    pub fn success(self) -> bool {
        self == ProcessStatus::Exited(0)
    }
}

impl From<ExitStatus> for ProcessStatus {
    fn from(st: ExitStatus) -> Self {
        match (st.code(), st.signal()) {
            (Some(c), _) => ProcessStatus::Exited(c as u8),
            (None, Some(sig)) => ProcessStatus::Signaled(sig),
            // Stopped/continued states are not reported by wait without WUNTRACED.
            (None, None) => ProcessStatus::Signaled(0),
        }
    }
}

impl fmt::Display for ProcessStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessStatus::Exited(c) => write!(f, "{c}"),
            ProcessStatus::Signaled(s) => write!(f, "signal {s}"),
        }
    }
}

/// Occupies fds 0..=5 so pipes created for children never land on the
/// descriptor numbers the shell remap writes to.
pub fn reserve_low_fds() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| loop {
        // SAFETY: plain open(2); low descriptors are leaked on purpose.
        let fd = unsafe {
            libc::open(
                c"/dev/null".as_ptr(),
                libc::O_RDWR | libc::O_CLOEXEC,
            )
        };
        if fd < 0 {
            break;
        }
        if fd > 5 {
            unsafe { libc::close(fd) };
            break;
        }
    });
}

pub(crate) fn kill_group(pid: u32, signal: i32) {
    // Children are spawned as group leaders, so -pid targets their group.
    unsafe {
        libc::kill(-(pid as libc::pid_t), signal);
    }
}

pub(crate) fn kill_pid(pid: u32, signal: i32) {
    unsafe {
        libc::kill(pid as libc::pid_t, signal);
    }
}
