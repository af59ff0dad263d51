//! Append-only session traces.
//!
//! Each session (one agent process across all of its generations) writes
//! `<trace_dir>/<session_id>.qtrace`. Every line is one JSON record:
//!
//! ```text
//! {"v":1,"session":"4711-…","pid":4711,"generation":0,"ts_ms":…,"kind":"start",…}
//! ```
//!
//! `v` is the schema version and appears on every line; the first line of a
//! file is always the generation-0 `start` record, which doubles as the
//! header. Lines are written with a single `write(2)` each on an `O_APPEND`
//! descriptor, so a killed process leaves a decodable prefix.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::guest::Usage;
use crate::tools::ProcessStatus;

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const TRACE_EXTENSION: &str = "qtrace";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Start {
        parent_pid: u32,
        #[serde(default)]
        parent_session: Option<String>,
        argv: Vec<String>,
        mission: String,
        wisdom_keys: Vec<String>,
        wisdom_digest: String,
    },
    GuestCall {
        turn: u32,
        /// Digest of every message in the request, in order.
        messages: Vec<String>,
        system_digest: String,
        #[serde(default)]
        usage: Option<Usage>,
        tool_calls: usize,
        #[serde(default)]
        error: Option<String>,
    },
    ToolStart {
        turn: u32,
        call_id: String,
        tool: String,
        detail: String,
    },
    ToolEnd {
        turn: u32,
        call_id: String,
        tool: String,
        #[serde(default)]
        status: Option<ProcessStatus>,
        #[serde(default)]
        truncated: Vec<String>,
        #[serde(default)]
        error: Option<String>,
    },
    ForkChild {
        turn: u32,
        call_id: String,
        index: usize,
        #[serde(default)]
        child_pid: Option<u32>,
        mission: String,
        /// Known only for waited children.
        #[serde(default)]
        status: Option<ProcessStatus>,
        #[serde(default)]
        job: Option<u64>,
    },
    ExecBoundary {
        turn: u32,
        wisdom_keys: Vec<String>,
        wisdom_digest: String,
        next_generation: u64,
    },
    Exit {
        status: i32,
        reason: String,
    },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Start { .. } => "start",
            TraceEvent::GuestCall { .. } => "guest_call",
            TraceEvent::ToolStart { .. } => "tool_start",
            TraceEvent::ToolEnd { .. } => "tool_end",
            TraceEvent::ForkChild { .. } => "fork_child",
            TraceEvent::ExecBoundary { .. } => "exec_boundary",
            TraceEvent::Exit { .. } => "exit",
        }
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub v: u32,
    pub session: String,
    pub pid: u32,
    pub generation: u64,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

/// Milliseconds on CLOCK_MONOTONIC, which is not reset by exec.
pub fn monotonic_ms() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    ts.tv_sec as u64 * 1000 + ts.tv_nsec as u64 / 1_000_000
}

/// `<pid>-<unix ms>-<random hex>`.
pub fn new_session_id(pid: u32) -> String {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    format!("{pid}-{ms}-{:08x}", rand::random::<u32>())
}

/// The pid encoded in a session id, if well formed.
pub fn session_pid(session_id: &str) -> Option<u32> {
    session_id.split('-').next()?.parse().ok()
}

pub fn trace_file(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.{TRACE_EXTENSION}"))
}

#[derive(Debug)]
pub struct SessionTrace {
    pub session_id: String,
    pub pid: u32,
    pub parent_pid: u32,
    pub generation: u64,
    events: Vec<TraceEvent>,
    file: Option<File>,
    path: Option<PathBuf>,
    finalized: bool,
    warned: bool,
}

impl SessionTrace {
    /// Opens (creating or appending to) the session file. Failure to open
    /// degrades to an in-memory trace with a warning on stderr.
    pub fn open(dir: Option<&Path>, session_id: &str, pid: u32, parent_pid: u32, generation: u64) -> Self {
        let mut warned = false;
        let (file, path) = match dir {
            Some(d) => {
                let p = trace_file(d, session_id);
                let opened = std::fs::create_dir_all(d)
                    .and_then(|_| OpenOptions::new().create(true).append(true).open(&p));
                match opened {
                    Ok(f) => (Some(f), Some(p)),
                    Err(e) => {
                        eprintln!("quine: warning: cannot open trace {}: {e}", p.display());
                        warned = true;
                        (None, Some(p))
                    }
                }
            }
            None => (None, None),
        };
        SessionTrace {
            session_id: session_id.to_string(),
            pid,
            parent_pid,
            generation,
            events: Vec::new(),
            file,
            path,
            finalized: false,
            warned,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Appends and flushes one event. Events after `Exit` are dropped.
    pub fn record(&mut self, event: TraceEvent) {
        if self.finalized {
            return;
        }
        if matches!(event, TraceEvent::Exit { .. }) {
            self.finalized = true;
        }
        if let Some(f) = self.file.as_mut() {
            let rec = TraceRecord {
                v: TRACE_SCHEMA_VERSION,
                session: self.session_id.clone(),
                pid: self.pid,
                generation: self.generation,
                ts_ms: monotonic_ms(),
                event: event.clone(),
            };
            let mut line = serde_json::to_vec(&rec).expect("trace record serializes");
            line.push(b'\n');
            if let Err(e) = f.write_all(&line) {
                if !self.warned {
                    eprintln!("quine: warning: trace write failed: {e}");
                    self.warned = true;
                }
            }
        }
        self.events.push(event);
    }
}

/// Parsed contents of one trace file.
#[derive(Debug, Clone, Default)]
pub struct TraceFile {
    pub records: Vec<TraceRecord>,
    pub corrupt_lines: usize,
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let mut out = TraceFile::default();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(&line) {
            Ok(r) => out.records.push(r),
            Err(_) => out.corrupt_lines += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeNode {
    pub session_id: String,
    pub pid: u32,
    pub parent_pid: u32,
    pub parent_session: Option<String>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Number of process images the session ran (exec count + 1).
    pub generations: u64,
    pub exec_count: usize,
    pub exit_status: Option<i32>,
    pub start_ts_ms: u64,
    pub exit_ts_ms: Option<u64>,
    pub mission: String,
    /// Pids named by this session's ForkChild records.
    pub forked_pids: Vec<u32>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ProcessTree {
    pub nodes: Vec<TreeNode>,
    /// Top-level sessions. More than one (or any orphan) means the tree hangs
    /// off a synthetic root.
    pub roots: Vec<usize>,
    pub synthetic_root: bool,
    pub corrupt_lines: usize,
    pub warnings: Vec<String>,
}

impl ProcessTree {
    pub fn session_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of levels below the (possibly synthetic) root, counting the
    /// top-level sessions as level 1.
    pub fn depth(&self) -> usize {
        fn walk(t: &ProcessTree, i: usize) -> usize {
            1 + t.nodes[i].children.iter().map(|&c| walk(t, c)).max().unwrap_or(0)
        }
        self.roots.iter().map(|&r| walk(self, r)).max().unwrap_or(0)
    }

    pub fn root(&self) -> Option<&TreeNode> {
        match self.roots.as_slice() {
            [only] if !self.synthetic_root => Some(&self.nodes[*only]),
            _ => None,
        }
    }

    pub fn find(&self, session_id: &str) -> Option<&TreeNode> {
        self.nodes.iter().find(|n| n.session_id == session_id)
    }

    /// Number of sessions on each level, from the top.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        let mut level = self.roots.clone();
        while !level.is_empty() {
            sizes.push(level.len());
            level = level.iter().flat_map(|&i| self.nodes[i].children.clone()).collect();
        }
        sizes
    }
}

/// Rebuilds the delegation tree from every trace file in `dir`.
pub fn reconstruct_tree(dir: &Path) -> Result<ProcessTree> {
    let mut tree = ProcessTree::default();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == TRACE_EXTENSION))
        .collect();
    paths.sort();

    for p in paths {
        let tf = read_trace(&p)?;
        tree.corrupt_lines += tf.corrupt_lines;
        let Some(first) = tf.records.first() else {
            tree.warnings.push(format!("{}: no decodable records", p.display()));
            continue;
        };
        let mut node = TreeNode {
            session_id: first.session.clone(),
            pid: first.pid,
            parent_pid: 0,
            parent_session: None,
            parent: None,
            children: Vec::new(),
            generations: 0,
            exec_count: 0,
            exit_status: None,
            start_ts_ms: first.ts_ms,
            exit_ts_ms: None,
            mission: String::new(),
            forked_pids: Vec::new(),
        };
        for r in &tf.records {
            node.generations = node.generations.max(r.generation + 1);
            match &r.event {
                TraceEvent::Start {
                    parent_pid,
                    parent_session,
                    mission,
                    ..
                } if r.generation == 0 || node.mission.is_empty() => {
                    node.parent_pid = *parent_pid;
                    node.parent_session = parent_session.clone();
                    node.mission = mission.clone();
                }
                TraceEvent::ExecBoundary { .. } => node.exec_count += 1,
                TraceEvent::Exit { status, .. } => {
                    node.exit_status = Some(*status);
                    node.exit_ts_ms = Some(r.ts_ms);
                }
                TraceEvent::ForkChild { child_pid: Some(pid), .. } => node.forked_pids.push(*pid),
                _ => {}
            }
        }
        tree.nodes.push(node);
    }

    let index: HashMap<String, usize> = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.session_id.clone(), i))
        .collect();
    let mut orphans = 0;
    for i in 0..tree.nodes.len() {
        match tree.nodes[i].parent_session.clone() {
            Some(ps) => match index.get(&ps) {
                Some(&p) => {
                    tree.nodes[i].parent = Some(p);
                    tree.nodes[p].children.push(i);
                }
                None => {
                    orphans += 1;
                    tree.warnings.push(format!(
                        "session {} names missing parent {ps}; attached to synthetic root",
                        tree.nodes[i].session_id
                    ));
                    tree.roots.push(i);
                }
            },
            None => tree.roots.push(i),
        }
    }
    tree.synthetic_root = orphans > 0 || tree.roots.len() > 1;

    // Lineage check: each forked pid should be exactly one child session.
    for n in &tree.nodes {
        let child_pids: BTreeMap<u32, usize> = n.children.iter().fold(BTreeMap::new(), |mut m, &c| {
            *m.entry(tree.nodes[c].pid).or_insert(0) += 1;
            m
        });
        for pid in &n.forked_pids {
            match child_pids.get(pid) {
                Some(1) => {}
                Some(k) => tree
                    .warnings
                    .push(format!("session {}: forked pid {pid} matches {k} child traces", n.session_id)),
                None => tree
                    .warnings
                    .push(format!("session {}: forked pid {pid} has no child trace", n.session_id)),
            }
        }
    }
    if tree.corrupt_lines > 0 {
        tree.warnings.push(format!("skipped {} corrupt trace line(s)", tree.corrupt_lines));
    }
    Ok(tree)
}
