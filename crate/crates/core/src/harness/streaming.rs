//! Long material consumed one segment per turn, with periodic exec renewal
//! carrying progress forward as wisdom.

use serde::Serialize;
use serde_json::json;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{install_script, mock_env, run_quine, Check, HarnessConfig};
use crate::error::{Error, Result};
use crate::guest::{MockResponse, MockRule, MockScript};
use crate::trace::{read_trace, TraceEvent};

pub const NEEDLE_MARKER: &str = "NEEDLE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StreamSpec {
    pub segment_count: usize,
    /// Zero-based index of the target segment.
    pub needle_index: usize,
    /// Words per segment, a stand-in for token count.
    pub tokens_per_segment: usize,
    pub seed: u64,
}

impl StreamSpec {
    pub fn new(segment_count: usize, needle_index: usize, tokens_per_segment: usize) -> Self {
        StreamSpec {
            segment_count,
            needle_index,
            tokens_per_segment,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.segment_count == 0 || self.tokens_per_segment == 0 {
            return Err(Error::Usage("segment count and tokens per segment must be positive".into()));
        }
        if self.needle_index >= self.segment_count {
            return Err(Error::Usage(format!(
                "needle index {} is outside {} segments",
                self.needle_index, self.segment_count
            )));
        }
        Ok(())
    }

    /// Segments read before the needle is seen, needle included.
    pub fn consumed(&self) -> usize {
        self.needle_index + 1
    }
}

/// One line per segment. Only the needle segment contains [`NEEDLE_MARKER`].
pub fn generate_stream(spec: &StreamSpec) -> Vec<String> {
    let mut rng = StdRng::seed_from_u64(spec.seed);
    (0..spec.segment_count)
        .map(|i| {
            let mut line = format!("segment {i:05}:");
            if i == spec.needle_index {
                let code: u32 = rng.random_range(100_000..1_000_000);
                line.push_str(&format!(" {NEEDLE_MARKER} the vault code is {code}"));
            }
            for _ in 0..spec.tokens_per_segment {
                let len = rng.random_range(2..8);
                line.push(' ');
                line.extend((0..len).map(|_| rng.random_range(b'a'..=b'z') as char));
            }
            line
        })
        .collect()
}

const MISSION: &str = "Read the conversation stream on stdin one segment per turn and report the segment containing NEEDLE.";

fn read_segment_command() -> String {
    format!(
        "IFS= read -r seg <&3 || exit 1; case \"$seg\" in *{NEEDLE_MARKER}*) printf '%s\\n' \"$seg\" >&4;; esac; printf '%s\\n' \"$seg\""
    )
}

/// Generation `g` reads segments `[g*r, min((g+1)*r, consumed))`, then
/// either execs with its progress or, holding the needle, exits.
pub fn streaming_script(spec: &StreamSpec, renewal_every: usize) -> MockScript {
    let consumed = spec.consumed();
    let generations = consumed.div_ceil(renewal_every);
    let mut plans = Vec::with_capacity(generations);
    for g in 0..generations {
        let start = g * renewal_every;
        let end = ((g + 1) * renewal_every).min(consumed);
        let mut turns: Vec<MockResponse> = (start..end).map(|_| MockResponse::sh(read_segment_command())).collect();
        if end == consumed {
            turns.push(MockResponse::exit(0));
        } else {
            turns.push(MockResponse::call(
                "exec",
                json!({"wisdom": {
                    "found_count": "0",
                    "current_position": end.to_string(),
                    "partial_content": format!("segments {start}-{} scanned, no match", end - 1),
                }}),
            ));
        }
        plans.push(turns);
    }
    MockScript {
        rules: vec![MockRule {
            pattern: format!("^{}$", regex::escape(MISSION)),
            responses: Vec::new(),
            generations: plans,
        }],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamReport {
    pub spec: StreamSpec,
    pub renewal_every: usize,
    pub expected_generations: usize,
    pub generations_used: u64,
    pub exec_boundaries: usize,
    pub pids: Vec<u32>,
    pub pid_constant: bool,
    pub answer_correct: bool,
    pub deliverable: String,
    pub root_exit: String,
    pub duration_ms: u64,
    pub checks: Vec<Check>,
}

pub fn run_streaming_experiment(spec: &StreamSpec, renewal_every: usize, cfg: &HarnessConfig) -> Result<StreamReport> {
    spec.validate()?;
    if renewal_every == 0 {
        return Err(Error::Usage("renewal interval must be positive".into()));
    }
    let dir = cfg.experiment_dir("streaming")?;
    let traces = dir.join("traces");
    let script = install_script(&dir, &streaming_script(spec, renewal_every))?;
    let env = mock_env(&script, &traces, renewal_every as u32 + 2);
    let segments = generate_stream(spec);
    let material = segments.iter().map(|s| format!("{s}\n")).collect::<String>();

    let out = run_quine(cfg, &env, MISSION, Some(material.into_bytes()))?;
    let deliverable = String::from_utf8_lossy(&out.stdout).into_owned();

    let mut files: Vec<_> = std::fs::read_dir(&traces)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    let records = match files.as_slice() {
        [one] => read_trace(one)?.records,
        _ => Vec::new(),
    };
    let mut pids: Vec<u32> = records.iter().map(|r| r.pid).collect();
    pids.sort_unstable();
    pids.dedup();
    let generations_used = records.iter().map(|r| r.generation + 1).max().unwrap_or(0);
    let exec_boundaries = records
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::ExecBoundary { .. }))
        .count();
    let wisdom_carried = records.iter().all(|r| match &r.event {
        TraceEvent::Start { wisdom_keys, .. } if r.generation > 0 => {
            wisdom_keys == &["current_position", "found_count", "partial_content"]
        }
        _ => true,
    });
    let expected_generations = spec.consumed().div_ceil(renewal_every);
    let pid_constant = pids == [out.pid];
    let answer_correct = deliverable == format!("{}\n", segments[spec.needle_index]);

    let checks = vec![
        Check::new("single session", files.len() == 1, format!("{} trace file(s)", files.len())),
        Check::new(
            "generations",
            generations_used == expected_generations as u64 && exec_boundaries + 1 == expected_generations,
            format!(
                "{generations_used} used, {expected_generations} expected, {exec_boundaries} exec boundaries"
            ),
        ),
        Check::new("pid constant", pid_constant, format!("pids {pids:?}")),
        Check::new("wisdom carried", wisdom_carried, "every later generation starts with all three keys"),
        Check::new("answer correct", answer_correct, format!("deliverable {:?}", deliverable.trim_end())),
        Check::new("root exit", out.status.code() == Some(0), format!("status {}", out.status)),
    ];
    Ok(StreamReport {
        spec: *spec,
        renewal_every,
        expected_generations,
        generations_used,
        exec_boundaries,
        pids,
        pid_constant,
        answer_correct,
        deliverable,
        root_exit: out.status.to_string(),
        duration_ms: out.duration.as_millis() as u64,
        checks,
    })
}
