use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::capture::{Backoff, Drain, Keep};
use super::{kill_pid, reserve_low_fds, ChildSpec, EnvMap, ForkCall, Limits, ProcessStatus};
use crate::env_vars;
use crate::error::{Error, Result};

/// Status reported for a child that could not be spawned.
pub const SPAWN_FAILURE_STATUS: u8 = 127;

const PIPE_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildOutcome {
    pub mission: String,
    /// `None` when the child never started.
    pub pid: Option<u32>,
    pub status: ProcessStatus,
    pub deliverable: String,
    pub deliverable_truncated: bool,
    pub diagnostics_tail: String,
}

/// Identifies a background child started by `fork` with `wait: false`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobHandle(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobPoll {
    Running,
    Done(ChildOutcome),
}

#[derive(Debug)]
pub enum ForkOutput {
    Completed(Vec<ChildOutcome>),
    Started(Vec<(JobHandle, Option<u32>)>),
}

enum Job {
    Running(RunningChild),
    /// Spawn failed; the outcome is already known.
    Failed(ChildOutcome),
}

struct RunningChild {
    mission: String,
    child: Child,
    stdout: Drain,
    stderr: Drain,
    feeder: Option<thread::JoinHandle<()>>,
}

impl RunningChild {
    fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Gathers captured output. Descendants that outlive the child may keep
    /// its pipes open; after a grace period whatever arrived is used.
    fn collect(mut self, status: ProcessStatus) -> ChildOutcome {
        let pid = self.pid();
        let deadline = Instant::now() + PIPE_GRACE;
        let out = self.stdout.finish_by(deadline);
        let err = self.stderr.finish_by(deadline);
        let (out, err) = match (out, err) {
            (Some(o), Some(e)) => (o, e),
            (o, e) => {
                let o = o.unwrap_or_else(|| self.stdout.abandon());
                let e = e.unwrap_or_else(|| self.stderr.abandon());
                (o, e)
            }
        };
        // A descendant may still hold the material pipe open; never block on it.
        if let Some(f) = self.feeder.take().filter(|f| f.is_finished()) {
            let _ = f.join();
        }
        ChildOutcome {
            mission: self.mission,
            pid: Some(pid),
            status,
            deliverable: out.text(),
            deliverable_truncated: out.truncated,
            diagnostics_tail: err.text(),
        }
    }
}

/// Children owned by one host loop.
#[derive(Default)]
pub struct JobTable {
    next: u64,
    jobs: BTreeMap<JobHandle, Job>,
}

impl JobTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    fn insert(&mut self, job: Job) -> JobHandle {
        let h = JobHandle(self.next);
        self.next += 1;
        self.jobs.insert(h, job);
        h
    }

    /// Reaps every finished job.
    pub fn poll_all(&mut self) -> Vec<(JobHandle, ChildOutcome)> {
        let handles: Vec<JobHandle> = self.jobs.keys().copied().collect();
        let mut done = Vec::new();
        for h in handles {
            if let Ok(JobPoll::Done(o)) = poll_job(self, h) {
                done.push((h, o));
            }
        }
        done
    }

    /// Blocks until the given job exits and returns its outcome.
    pub fn wait(&mut self, h: JobHandle) -> Result<ChildOutcome> {
        match self.jobs.remove(&h).ok_or(Error::UnknownHandle(h.0))? {
            Job::Failed(o) => Ok(o),
            Job::Running(mut rc) => {
                let status = rc.child.wait()?;
                Ok(rc.collect(status.into()))
            }
        }
    }

    /// Kills and reaps every remaining child. Returns the pids that were
    /// still running.
    pub fn terminate_all(&mut self) -> Vec<u32> {
        let mut killed = Vec::new();
        for (_, job) in std::mem::take(&mut self.jobs) {
            if let Job::Running(mut rc) = job {
                if let Ok(None) = rc.child.try_wait() {
                    killed.push(rc.pid());
                }
                kill_pid(rc.pid(), libc::SIGKILL);
                let status = rc.child.wait().map(ProcessStatus::from).unwrap_or(ProcessStatus::Signaled(libc::SIGKILL));
                let _ = rc.collect(status);
            }
        }
        killed
    }
}

impl Drop for JobTable {
    fn drop(&mut self) {
        self.terminate_all();
    }
}

/// Non-blocking status check. `Done` consumes the handle.
pub fn poll_job(jobs: &mut JobTable, h: JobHandle) -> Result<JobPoll> {
    let finished = match jobs.jobs.get_mut(&h).ok_or(Error::UnknownHandle(h.0))? {
        Job::Failed(_) => true,
        Job::Running(rc) => rc.child.try_wait()?.is_some(),
    };
    if finished {
        jobs.wait(h).map(JobPoll::Done)
    } else {
        Ok(JobPoll::Running)
    }
}

/// Environment for a forked child: a copy of the parent's, starting a new
/// session at generation 0. Wisdom variables are inherited.
pub fn child_environment(env: &EnvMap, parent_session: Option<&str>) -> EnvMap {
    let mut child = env.clone();
    child.remove(&OsString::from(env_vars::GENERATION));
    child.remove(&OsString::from(env_vars::SESSION_ID));
    match parent_session {
        Some(s) => {
            child.insert(env_vars::PARENT_SESSION.into(), s.into());
        }
        None => {
            child.remove(&OsString::from(env_vars::PARENT_SESSION));
        }
    }
    child
}

fn spawn_child(spec: &ChildSpec, self_image: &Path, env: &EnvMap, limits: &Limits) -> Job {
    let mut cmd = Command::new(self_image);
    cmd.arg("--")
        .arg(spec.mission.as_str())
        .env_clear()
        .envs(env)
        .stdin(if spec.material.is_some() {
            Stdio::piped()
        } else {
            Stdio::null()
        })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    match cmd.spawn() {
        Ok(mut child) => {
            let feeder = match (spec.material.clone(), child.stdin.take()) {
                (Some(text), Some(mut stdin)) => Some(thread::spawn(move || {
                    // A child that stops reading early yields EPIPE; that is its choice.
                    let _ = stdin.write_all(text.as_bytes());
                })),
                _ => None,
            };
            let stdout = Drain::spawn(child.stdout.take().expect("piped"), Keep::Head(limits.deliverable_cap));
            let stderr = Drain::spawn(child.stderr.take().expect("piped"), Keep::Tail(limits.diagnostics_tail));
            Job::Running(RunningChild {
                mission: spec.mission.to_string(),
                child,
                stdout,
                stderr,
                feeder,
            })
        }
        Err(e) => Job::Failed(ChildOutcome {
            mission: spec.mission.to_string(),
            pid: None,
            status: ProcessStatus::Exited(SPAWN_FAILURE_STATUS),
            deliverable: String::new(),
            deliverable_truncated: false,
            diagnostics_tail: format!("quine: failed to spawn {}: {e}", self_image.display()),
        }),
    }
}

/// Spawns one copy of `self_image` per child, each with the child's mission
/// as argv. With `wait` the call blocks until every child has exited and
/// returns outcomes in request order; children run in parallel and their
/// pipes are drained while waiting.
pub fn do_fork(
    call: &ForkCall,
    self_image: &Path,
    env: &EnvMap,
    parent_session: Option<&str>,
    limits: &Limits,
    jobs: &mut JobTable,
) -> Result<ForkOutput> {
    if call.children.is_empty() {
        return Err(Error::MalformedToolArguments {
            tool: "fork".into(),
            reason: "children must not be empty".into(),
        });
    }
    if call.children.len() > limits.max_fork_children {
        return Err(Error::MalformedToolArguments {
            tool: "fork".into(),
            reason: format!(
                "{} children requested, at most {} allowed",
                call.children.len(),
                limits.max_fork_children
            ),
        });
    }
    reserve_low_fds();
    let env = child_environment(env, parent_session);
    let started: Vec<(JobHandle, Option<u32>)> = call
        .children
        .iter()
        .map(|spec| {
            let job = spawn_child(spec, self_image, &env, limits);
            let pid = match &job {
                Job::Running(rc) => Some(rc.pid()),
                Job::Failed(_) => None,
            };
            (jobs.insert(job), pid)
        })
        .collect();
    if !call.wait {
        return Ok(ForkOutput::Started(started));
    }

    // Reap in completion order so a slow first child does not delay the rest.
    let mut pending: Vec<JobHandle> = started.iter().map(|(h, _)| *h).collect();
    let mut outcomes: BTreeMap<JobHandle, ChildOutcome> = BTreeMap::new();
    let mut backoff = Backoff::new();
    while !pending.is_empty() {
        let mut progressed = false;
        let mut i = 0;
        while i < pending.len() {
            match poll_job(jobs, pending[i])? {
                JobPoll::Done(o) => {
                    outcomes.insert(pending.swap_remove(i), o);
                    progressed = true;
                }
                JobPoll::Running => i += 1,
            }
        }
        if !progressed {
            backoff.sleep();
        } else {
            backoff = Backoff::new();
        }
    }
    Ok(ForkOutput::Completed(
        started
            .iter()
            .map(|(h, _)| outcomes.remove(h).expect("every started child reaped"))
            .collect(),
    ))
}
