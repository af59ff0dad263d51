//! The reactive loop: assemble context, ask the Guest, run the tools it
//! names, feed results back, repeat until `exit`.
//!
//! The host never writes to stdout itself. The only path to the deliverable
//! stream is fd 4 inside `sh`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::env_vars;
use crate::error::{Error, Result};
use crate::guest::{self, Guest, GuestRequest, GuestResponse, ProviderConfig, Usage};
use crate::protocol::{
    assemble_context_with_advisory, parse_guest_response, ChannelSet, MaterialStatus, Message, Mission,
    ToolCallRecord, WisdomMap,
};
use crate::tools::{
    self, do_fork, run_sh, ChildOutcome, EnvMap, ExecCall, ExecPlan, ExitCall, ForkCall, ForkOutput, JobHandle,
    JobTable, Limits, ShCall, ShResult, ToolCall,
};
use crate::trace::{new_session_id, session_pid, SessionTrace, TraceEvent};

/// Exit status when the turn budget runs out without an `exit` call.
pub const EXIT_TURN_BUDGET: i32 = 70;
/// Exit status when the provider fails after retries or returns garbage.
pub const EXIT_PROVIDER: i32 = 75;
/// Exit status for command-line misuse.
pub const EXIT_USAGE: i32 = 64;

pub const DEFAULT_MAX_TURNS: u32 = 32;
pub const DEFAULT_CONTEXT_WINDOW: u64 = 128_000;
pub const DEFAULT_PRESSURE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct HostConfig {
    pub max_turns: u32,
    pub provider: ProviderConfig,
    pub limits: Limits,
    pub trace_dir: Option<PathBuf>,
    /// Fraction of `context_window_tokens` above which a renewal advisory is added.
    pub context_pressure_threshold: f64,
    pub context_window_tokens: u64,
    pub max_output_tokens: u32,
}

impl HostConfig {
    pub fn new(provider: ProviderConfig) -> Self {
        HostConfig {
            max_turns: DEFAULT_MAX_TURNS,
            provider,
            limits: Limits::default(),
            trace_dir: None,
            context_pressure_threshold: DEFAULT_PRESSURE_THRESHOLD,
            context_window_tokens: DEFAULT_CONTEXT_WINDOW,
            max_output_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopState {
    pub mission: Mission,
    pub wisdom: WisdomMap,
    pub history: Vec<Message>,
    pub turn: u32,
    pub material_status: MaterialStatus,
}

/// Replaces the process image; returns only on failure.
pub type ExecHook = Box<dyn FnMut(&ExecPlan) -> Error>;

/// What executing one tool call produced.
pub enum ToolEffect {
    Result(Message),
    Exit(i32),
}

pub struct Host {
    config: HostConfig,
    state: LoopState,
    guest: Box<dyn Guest>,
    channels: ChannelSet,
    env: EnvMap,
    argv: Vec<OsString>,
    self_image: PathBuf,
    jobs: JobTable,
    trace: SessionTrace,
    last_usage: Option<Usage>,
    exec_hook: ExecHook,
}

fn utf8_env(env: &EnvMap) -> impl Iterator<Item = (&str, &str)> {
    env.iter().filter_map(|(k, v)| Some((k.to_str()?, v.to_str()?)))
}

fn env_str<'a>(env: &'a EnvMap, key: &str) -> Option<&'a str> {
    env.get(&OsString::from(key)).and_then(|v| v.to_str())
}

impl Host {
    /// Sets up session identity, wisdom and tracing for this process image.
    ///
    /// A session continues (same trace file, generation from the
    /// environment) only when `QUINE_SESSION_ID` names this very pid, which
    /// is exactly the exec case. Anything else starts a new session at
    /// generation 0.
    pub fn new(
        config: HostConfig,
        mission: Mission,
        argv: Vec<OsString>,
        mut env: EnvMap,
        channels: ChannelSet,
        guest: Box<dyn Guest>,
    ) -> Result<Self> {
        let pid = std::process::id();
        let parent_pid = unsafe { libc::getppid() } as u32;
        let inherited = env_str(&env, env_vars::SESSION_ID).map(str::to_string);
        let continuing = inherited.as_deref().and_then(session_pid) == Some(pid);

        let mut wisdom = WisdomMap::from_env(utf8_env(&env));
        let (session_id, parent_session) = if continuing {
            (
                inherited.clone().unwrap_or_default(),
                env_str(&env, env_vars::PARENT_SESSION).map(str::to_string),
            )
        } else {
            let parent = inherited.or_else(|| env_str(&env, env_vars::PARENT_SESSION).map(str::to_string));
            wisdom = WisdomMap::from_entries(wisdom.entries().clone(), 0)?;
            (new_session_id(pid), parent)
        };

        env.insert(env_vars::SESSION_ID.into(), session_id.clone().into());
        env.insert(env_vars::GENERATION.into(), wisdom.generation().to_string().into());
        match &parent_session {
            Some(p) => env.insert(env_vars::PARENT_SESSION.into(), p.into()),
            None => env.remove(&OsString::from(env_vars::PARENT_SESSION)),
        };
        if let Some(d) = &config.trace_dir {
            env.insert(env_vars::TRACE_DIR.into(), d.clone().into());
        }

        let mut trace = SessionTrace::open(config.trace_dir.as_deref(), &session_id, pid, parent_pid, wisdom.generation());
        trace.record(TraceEvent::Start {
            parent_pid,
            parent_session,
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            mission: mission.to_string(),
            wisdom_keys: wisdom.entries().keys().cloned().collect(),
            wisdom_digest: wisdom.digest(),
        });

        let material_status = channels.material_status();
        Ok(Host {
            config,
            state: LoopState {
                mission,
                wisdom,
                history: Vec::new(),
                turn: 0,
                material_status,
            },
            guest,
            channels,
            env,
            argv,
            self_image: std::env::current_exe()?,
            jobs: JobTable::new(),
            trace,
            last_usage: None,
            exec_hook: Box::new(|plan: &ExecPlan| tools::do_exec(plan)),
        })
    }

    pub fn with_self_image(mut self, path: PathBuf) -> Self {
        self.self_image = path;
        self
    }

    pub fn with_exec_hook(mut self, hook: ExecHook) -> Self {
        self.exec_hook = hook;
        self
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn trace(&self) -> &SessionTrace {
        &self.trace
    }

    pub fn env(&self) -> &EnvMap {
        &self.env
    }

    fn estimated_context_tokens(&self, messages: &[Message]) -> u64 {
        match self.last_usage {
            Some(u) => u.input_tokens + u.output_tokens,
            None => messages.iter().map(|m| m.content.len() as u64).sum::<u64>() / 4,
        }
    }

    fn advisory(&self, messages: &[Message]) -> Option<String> {
        let used = self.estimated_context_tokens(messages);
        let limit = self.config.context_window_tokens as f64 * self.config.context_pressure_threshold;
        (used as f64 >= limit).then(|| {
            format!(
                "estimated context use is {used} of {} tokens. Consider exec with wisdom to continue with a fresh context.",
                self.config.context_window_tokens
            )
        })
    }

    /// Builds the next Guest request from current state.
    pub fn next_request(&mut self) -> GuestRequest {
        self.state.material_status = self.channels.material_status();
        let base = assemble_context_with_advisory(
            &self.state.mission,
            &self.state.wisdom,
            &self.state.history,
            self.state.material_status,
            None,
        );
        let messages = match self.advisory(&base) {
            None => base,
            Some(a) => assemble_context_with_advisory(
                &self.state.mission,
                &self.state.wisdom,
                &self.state.history,
                self.state.material_status,
                Some(&a),
            ),
        };
        GuestRequest::new(messages, self.config.provider.model_id(), self.config.max_output_tokens)
    }

    fn finish(&mut self, status: i32, reason: &str) -> i32 {
        let killed = self.jobs.terminate_all();
        if !killed.is_empty() {
            self.channels
                .diagnose(&format!("quine: terminated {} unwaited child(ren): {killed:?}", killed.len()));
        }
        self.trace.record(TraceEvent::Exit {
            status,
            reason: reason.to_string(),
        });
        status
    }

    /// Runs until the Guest exits or a runtime limit is hit. Returns the
    /// status the process must exit with.
    pub fn run(&mut self) -> i32 {
        loop {
            if self.state.turn >= self.config.max_turns {
                self.channels.diagnose(&format!(
                    "quine: turn budget of {} exhausted without exit",
                    self.config.max_turns
                ));
                return self.finish(EXIT_TURN_BUDGET, "turn budget exhausted");
            }
            let request = self.next_request();
            let digests: Vec<String> = request.messages.iter().map(Message::digest).collect();
            let system_digest = digests[0].clone();
            let turn = self.state.turn;
            self.state.turn += 1;

            let response = match guest::complete(&request, self.guest.as_ref()) {
                Ok(r) => r,
                Err(e) => {
                    self.trace.record(TraceEvent::GuestCall {
                        turn,
                        messages: digests,
                        system_digest,
                        usage: None,
                        tool_calls: 0,
                        error: Some(e.to_string()),
                    });
                    self.channels.diagnose(&format!("quine: guest failed: {e}"));
                    return self.finish(EXIT_PROVIDER, "provider failure");
                }
            };
            self.trace.record(TraceEvent::GuestCall {
                turn,
                messages: digests,
                system_digest,
                usage: response.usage,
                tool_calls: response.tool_calls.len(),
                error: None,
            });
            if response.usage.is_some() {
                self.last_usage = response.usage;
            }
            if let Some(status) = self.handle_response(turn, response) {
                return status;
            }
        }
    }

    fn handle_response(&mut self, turn: u32, response: GuestResponse) -> Option<i32> {
        let parsed = parse_guest_response(&response);
        let text = response.assistant_text.clone().unwrap_or_default();
        self.state.history.push(Message::assistant(
            text.clone(),
            response
                .tool_calls
                .iter()
                .map(|tc| ToolCallRecord {
                    id: tc.id.clone(),
                    name: tc.name.clone(),
                    arguments: tc.arguments.clone(),
                })
                .collect(),
        ));
        if parsed.is_empty() {
            if text.trim().is_empty() {
                self.channels
                    .diagnose("quine: warning: guest returned neither text nor tool calls");
            } else {
                self.channels.diagnose(&text);
            }
            return None;
        }

        let mut stop_reason: Option<&'static str> = None;
        let mut results = Vec::with_capacity(parsed.len());
        for pc in parsed {
            if let Some(reason) = stop_reason {
                results.push(Message::tool_result(pc.id, format!("skipped: an earlier {reason} call ended this turn")));
                continue;
            }
            match pc.call {
                Err(e) => results.push(Message::tool_result(pc.id, format!("error: {e}"))),
                Ok(call) => {
                    let is_exec = matches!(call, ToolCall::Exec(_));
                    match self.execute_tool(turn, &pc.id, call) {
                        ToolEffect::Exit(status) => return Some(status),
                        ToolEffect::Result(m) => {
                            results.push(m);
                            if is_exec {
                                stop_reason = Some("exec");
                            }
                        }
                    }
                }
            }
        }
        let notices = self.job_notices(turn);
        if let (Some(last), false) = (results.last_mut(), notices.is_empty()) {
            last.content.push_str(&notices);
        }
        self.state.history.extend(results);
        None
    }

    fn job_notices(&mut self, turn: u32) -> String {
        let mut out = String::new();
        for (h, o) in self.jobs.poll_all() {
            self.trace.record(TraceEvent::ToolEnd {
                turn,
                call_id: format!("job-{}", h.0),
                tool: "fork".into(),
                status: Some(o.status),
                truncated: if o.deliverable_truncated { vec!["deliverable".into()] } else { vec![] },
                error: None,
            });
            let _ = write!(out, "\n\n=== job {} finished ===\n", h.0);
            out.push_str(&render_child(&o, None));
        }
        out
    }

    /// Dispatches one decoded call and renders its result.
    pub fn execute_tool(&mut self, turn: u32, call_id: &str, call: ToolCall) -> ToolEffect {
        let detail = match &call {
            ToolCall::Sh(s) => s.command.clone(),
            ToolCall::Fork(f) => f
                .children
                .iter()
                .map(|c| c.mission.as_str())
                .collect::<Vec<_>>()
                .join(" | "),
            ToolCall::Exec(e) => e.wisdom.entries().keys().cloned().collect::<Vec<_>>().join(","),
            ToolCall::Exit(x) => x.status.to_string(),
        };
        self.trace.record(TraceEvent::ToolStart {
            turn,
            call_id: call_id.to_string(),
            tool: call.name().into(),
            detail,
        });
        match call {
            ToolCall::Sh(sh) => ToolEffect::Result(self.tool_sh(turn, call_id, &sh)),
            ToolCall::Fork(f) => ToolEffect::Result(self.tool_fork(turn, call_id, &f)),
            ToolCall::Exec(e) => ToolEffect::Result(self.tool_exec(turn, call_id, &e)),
            ToolCall::Exit(x) => ToolEffect::Exit(self.tool_exit(&x)),
        }
    }

    fn tool_error(&mut self, turn: u32, call_id: &str, tool: &str, e: &Error) -> Message {
        self.trace.record(TraceEvent::ToolEnd {
            turn,
            call_id: call_id.into(),
            tool: tool.into(),
            status: None,
            truncated: vec![],
            error: Some(e.to_string()),
        });
        Message::tool_result(call_id, format!("error: {e}"))
    }

    fn tool_sh(&mut self, turn: u32, call_id: &str, call: &ShCall) -> Message {
        match run_sh(call, &self.channels, &self.env, &self.config.limits) {
            Ok(res) => {
                let mut truncated = Vec::new();
                if res.stdout_truncated {
                    truncated.push("stdout".into());
                }
                if res.stderr_truncated {
                    truncated.push("stderr".into());
                }
                self.trace.record(TraceEvent::ToolEnd {
                    turn,
                    call_id: call_id.into(),
                    tool: "sh".into(),
                    status: Some(res.status),
                    truncated,
                    error: None,
                });
                Message::tool_result(call_id, render_sh(&res, self.config.limits.sh_stream_cap))
            }
            Err(e) => self.tool_error(turn, call_id, "sh", &e),
        }
    }

    fn tool_fork(&mut self, turn: u32, call_id: &str, call: &ForkCall) -> Message {
        let out = do_fork(
            call,
            &self.self_image,
            &self.env,
            Some(&self.trace.session_id.clone()),
            &self.config.limits,
            &mut self.jobs,
        );
        match out {
            Err(e) => self.tool_error(turn, call_id, "fork", &e),
            Ok(ForkOutput::Completed(outcomes)) => {
                for (index, o) in outcomes.iter().enumerate() {
                    self.trace.record(TraceEvent::ForkChild {
                        turn,
                        call_id: call_id.into(),
                        index,
                        child_pid: o.pid,
                        mission: o.mission.clone(),
                        status: Some(o.status),
                        job: None,
                    });
                }
                self.trace.record(TraceEvent::ToolEnd {
                    turn,
                    call_id: call_id.into(),
                    tool: "fork".into(),
                    status: None,
                    truncated: outcomes
                        .iter()
                        .enumerate()
                        .filter(|(_, o)| o.deliverable_truncated)
                        .map(|(i, _)| format!("child {i} deliverable"))
                        .collect(),
                    error: None,
                });
                Message::tool_result(call_id, render_fork(&outcomes))
            }
            Ok(ForkOutput::Started(handles)) => {
                for (index, ((h, pid), spec)) in handles.iter().zip(&call.children).enumerate() {
                    self.trace.record(TraceEvent::ForkChild {
                        turn,
                        call_id: call_id.into(),
                        index,
                        child_pid: *pid,
                        mission: spec.mission.to_string(),
                        status: None,
                        job: Some(h.0),
                    });
                }
                self.trace.record(TraceEvent::ToolEnd {
                    turn,
                    call_id: call_id.into(),
                    tool: "fork".into(),
                    status: None,
                    truncated: vec![],
                    error: None,
                });
                Message::tool_result(call_id, render_started(&handles, call))
            }
        }
    }

    fn tool_exec(&mut self, turn: u32, call_id: &str, call: &ExecCall) -> Message {
        let plan = ExecPlan::new(&self.self_image, &self.argv, &self.env, &self.state.wisdom, call);
        let killed = self.jobs.terminate_all();
        if !killed.is_empty() {
            self.channels
                .diagnose(&format!("quine: terminated {} unwaited child(ren) before exec", killed.len()));
        }
        self.trace.record(TraceEvent::ExecBoundary {
            turn,
            wisdom_keys: call.wisdom.entries().keys().cloned().collect(),
            wisdom_digest: plan.wisdom.digest(),
            next_generation: plan.wisdom.generation(),
        });
        let err = (self.exec_hook)(&plan);
        self.tool_error(turn, call_id, "exec", &err)
    }

    fn tool_exit(&mut self, call: &ExitCall) -> i32 {
        if let Some(msg) = &call.message {
            self.channels.diagnose(msg);
        }
        self.finish(call.status as i32, "exit tool")
    }
}

fn section(out: &mut String, title: &str, body: &str, truncated_at: Option<usize>) {
    match truncated_at {
        Some(n) => {
            let _ = writeln!(out, "--- {title} (truncated to {n} bytes) ---");
        }
        None => {
            let _ = writeln!(out, "--- {title} ---");
        }
    }
    out.push_str(body);
    if !body.is_empty() && !body.ends_with('\n') {
        out.push('\n');
    }
}

/// Text rendering of an `sh` result as shown to the Guest.
pub fn render_sh(res: &ShResult, cap: usize) -> String {
    let mut out = String::new();
    let _ = write!(out, "exit_status: {}", res.status);
    if res.timed_out {
        out.push_str(" (timed out)");
    }
    let _ = writeln!(out, "\nduration_ms: {}", res.duration_ms);
    section(&mut out, "stdout", &res.stdout, res.stdout_truncated.then_some(cap));
    section(&mut out, "stderr", &res.stderr, res.stderr_truncated.then_some(cap));
    out
}

fn render_child(o: &ChildOutcome, index: Option<usize>) -> String {
    let mut out = String::new();
    let label = index.map(|i| format!("child {i} ")).unwrap_or_default();
    let _ = writeln!(out, "mission: {}", serde_json::to_string(&o.mission).unwrap_or_default());
    match o.pid {
        Some(p) => {
            let _ = writeln!(out, "pid: {p}");
        }
        None => out.push_str("pid: (not started)\n"),
    }
    let _ = writeln!(out, "exit_status: {}", o.status);
    section(&mut out, &format!("{label}stdout"), &o.deliverable, None);
    if o.deliverable_truncated {
        out.push_str("(deliverable truncated)\n");
    }
    section(&mut out, &format!("{label}stderr tail"), &o.diagnostics_tail, None);
    out
}

/// Text rendering of waited `fork` outcomes, in request order.
pub fn render_fork(outcomes: &[ChildOutcome]) -> String {
    let mut out = format!("children: {}\n", outcomes.len());
    for (i, o) in outcomes.iter().enumerate() {
        let _ = writeln!(out, "=== child {i} ===");
        out.push_str(&render_child(o, Some(i)));
    }
    out
}

fn render_started(handles: &[(JobHandle, Option<u32>)], call: &ForkCall) -> String {
    let mut out = format!("started {} background child(ren)\n", handles.len());
    for ((h, pid), spec) in handles.iter().zip(&call.children) {
        let pid = pid.map(|p| p.to_string()).unwrap_or_else(|| "(not started)".into());
        let _ = writeln!(
            out,
            "job {}: pid {pid} mission {}",
            h.0,
            serde_json::to_string(spec.mission.as_str()).unwrap_or_default()
        );
    }
    out.push_str("Completions are reported in later tool results.\n");
    out
}
