use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::capture::{Backoff, Drain, Keep};
use super::{kill_group, reserve_low_fds, EnvMap, Limits, ProcessStatus, ShCall};
use crate::error::{Error, Result};
use crate::protocol::ChannelSet;

/// Grace period for output pipes to close after the shell itself exits.
/// How long to wait for EOF once the group has been killed; a descendant
/// that left the group can otherwise hold the pipe forever.
const KILL_GRACE: Duration = Duration::from_millis(200);
const PIPE_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShResult {
    pub stdout: String,
    pub stderr: String,
    pub status: ProcessStatus,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub timed_out: bool,
    pub duration_ms: u64,
}

/// Runs `sh -c <command>` with the runtime's streams remapped to fds 3/4/5.
///
/// The command's own stdin is `/dev/null`; its stdout and stderr are
/// captured up to `limits.sh_stream_cap` bytes each. On timeout the whole
/// process group is killed and the result carries the signal.
pub fn run_sh(call: &ShCall, channels: &ChannelSet, env: &EnvMap, limits: &Limits) -> Result<ShResult> {
    reserve_low_fds();
    let started = Instant::now();
    let timeout = Duration::from_secs(call.timeout_s.unwrap_or(limits.default_timeout_s));
    let deadline = started + timeout;

    let remap = channels.remap();
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c")
        .arg(&call.command)
        .env_clear()
        .envs(env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    // SAFETY: dup2 is async-signal-safe. Sources are >= 10 and fds 3..=5 are
    // reserved in the parent, so no std-internal pipe is overwritten.
    unsafe {
        cmd.pre_exec(move || {
            for (target, source) in remap {
                if libc::dup2(source, target) < 0 {
                    return Err(std::io::Error::last_os_error());
                }
            }
            Ok(())
        });
    }
    let mut child = cmd.spawn().map_err(|source| Error::SpawnFailure {
        what: "sh".into(),
        source,
    })?;
    let pid = child.id();
    let mut out = Drain::spawn(child.stdout.take().expect("piped"), Keep::Head(limits.sh_stream_cap));
    let mut err = Drain::spawn(child.stderr.take().expect("piped"), Keep::Head(limits.sh_stream_cap));

    let mut timed_out = false;
    let mut backoff = Backoff::new();
    let status = loop {
        if let Some(st) = child.try_wait()? {
            break st;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(pid, libc::SIGKILL);
            break child.wait()?;
        }
        backoff.sleep();
    };

    // Background jobs of the command may keep the pipes open.
    let pipe_deadline = Instant::now() + PIPE_GRACE;
    let stdout = match out.finish_by(pipe_deadline) {
        Some(c) => c,
        None => {
            kill_group(pid, libc::SIGKILL);
            out.finish_by(Instant::now() + KILL_GRACE).unwrap_or_else(|| out.abandon())
        }
    };
    let stderr = match err.finish_by(pipe_deadline) {
        Some(c) => c,
        None => {
            kill_group(pid, libc::SIGKILL);
            err.finish_by(Instant::now() + KILL_GRACE).unwrap_or_else(|| err.abandon())
        }
    };

    Ok(ShResult {
        stdout: stdout.text(),
        stderr: stderr.text(),
        status: status.into(),
        stdout_truncated: stdout.truncated,
        stderr_truncated: stderr.truncated,
        timed_out,
        duration_ms: started.elapsed().as_millis() as u64,
    })
}
