//! Scripted Guest for offline runs.
//!
//! A script is one JSON document:
//!
//! ```json
//! {
//!   "rules": [
//!     {
//!       "match": "^count",
//!       "responses": [
//!         {"tool_calls": [{"name": "sh", "arguments": {"command": "echo 1"}}]},
//!         {"tool_calls": [{"name": "exit", "arguments": {"status": 0}}]}
//!       ]
//!     },
//!     {
//!       "match": "^renew",
//!       "generations": [
//!         [{"tool_calls": [{"name": "exec", "arguments": {"wisdom": {"k": "v"}}}]}],
//!         [{"tool_calls": [{"name": "exit", "arguments": {"status": 0}}]}]
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! `match` is a regular expression searched in the mission; the first
//! matching rule wins. Generation `g` replays `generations[g]` when present,
//! otherwise `responses`. Turn `t` of a generation (the number of assistant
//! messages already in the request) returns entry `t`. Running past the end
//! of the list, or matching no rule, yields `exit(1)`.

use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Guest, GuestRequest, GuestResponse, RawToolCall, Usage};
use crate::error::{Error, Result};
use crate::protocol::{parse_system_prompt, Role};

/// Synthetic input tokens charged per request message.
pub const MOCK_TOKENS_PER_MESSAGE: u64 = 64;
/// Synthetic output tokens charged per tool call.
pub const MOCK_TOKENS_PER_CALL: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockToolCall {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub name: String,
    /// An object, or a string holding raw (possibly malformed) argument text.
    #[serde(default)]
    pub arguments: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub tool_calls: Vec<MockToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl MockResponse {
    pub fn call(name: &str, arguments: Value) -> Self {
        MockResponse {
            text: None,
            tool_calls: vec![MockToolCall {
                id: None,
                name: name.into(),
                arguments,
            }],
            usage: None,
        }
    }

    pub fn sh(command: impl Into<String>) -> Self {
        Self::call("sh", serde_json::json!({ "command": command.into() }))
    }

    pub fn exit(status: u8) -> Self {
        Self::call("exit", serde_json::json!({ "status": status }))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<MockResponse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generations: Vec<Vec<MockResponse>>,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, responses: Vec<MockResponse>) -> Self {
        MockRule {
            pattern: pattern.into(),
            responses,
            generations: Vec::new(),
        }
    }

    /// A rule whose pattern matches `mission` exactly.
    pub fn exact(mission: &str, responses: Vec<MockResponse>) -> Self {
        Self::new(format!("^{}$", regex::escape(mission)), responses)
    }

    fn turns(&self, generation: u64) -> &[MockResponse] {
        usize::try_from(generation)
            .ok()
            .and_then(|g| self.generations.get(g))
            .map(Vec::as_slice)
            .unwrap_or(&self.responses)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct MockGuest {
    script: MockScript,
    patterns: Vec<Regex>,
    origin: PathBuf,
}

impl MockGuest {
    pub fn load(path: &Path) -> Result<Self> {
        let err = |reason: String| Error::MockScript {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let script: MockScript = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let mut g = Self::from_script(script).map_err(|e| err(e.to_string()))?;
        g.origin = path.to_path_buf();
        Ok(g)
    }

    pub fn from_script(script: MockScript) -> Result<Self> {
        let patterns = script
            .rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern).map_err(|e| Error::MockScript {
                    path: PathBuf::new(),
                    reason: format!("bad pattern {:?}: {e}", r.pattern),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MockGuest {
            script,
            patterns,
            origin: PathBuf::new(),
        })
    }

    fn respond(&self, request: &GuestRequest) -> GuestResponse {
        let Some(header) = request
            .messages
            .first()
            .filter(|m| m.role == Role::System)
            .and_then(|m| parse_system_prompt(&m.content))
        else {
            return GuestResponse::exit("mock-exit", 1, "mock guest: request has no recognizable system prompt");
        };
        let generation = header.generation;
        let turn = request
            .messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count();
        let fallback_id = format!("mock-g{generation}-t{turn}-exit");
        let Some(idx) = self.patterns.iter().position(|p| p.is_match(&header.mission)) else {
            return GuestResponse::exit(
                fallback_id,
                1,
                &format!("mock guest: no rule in {} matches the mission", self.origin.display()),
            );
        };
        let Some(scripted) = self.script.rules[idx].turns(generation).get(turn) else {
            return GuestResponse::exit(
                fallback_id,
                1,
                &format!("mock guest: script exhausted at generation {generation} turn {turn}"),
            );
        };
        let tool_calls: Vec<RawToolCall> = scripted
            .tool_calls
            .iter()
            .enumerate()
            .map(|(i, tc)| RawToolCall {
                id: tc
                    .id
                    .clone()
                    .unwrap_or_else(|| format!("mock-g{generation}-t{turn}-{i}")),
                name: tc.name.clone(),
                arguments: match &tc.arguments {
                    Value::String(s) => s.clone(),
                    Value::Null => "{}".to_string(),
                    other => other.to_string(),
                },
            })
            .collect();
        let usage = scripted.usage.unwrap_or(Usage {
            input_tokens: MOCK_TOKENS_PER_MESSAGE * request.messages.len() as u64,
            output_tokens: MOCK_TOKENS_PER_CALL * tool_calls.len() as u64,
        });
        GuestResponse {
            assistant_text: scripted.text.clone(),
            tool_calls,
            usage: Some(usage),
        }
    }
}

impl Guest for MockGuest {
    fn complete(&self, request: &GuestRequest) -> Result<GuestResponse> {
        Ok(self.respond(request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{assemble_context, MaterialStatus, Message, Mission, WisdomMap};
    use serde_json::json;

    fn request(mission: &str, generation: u64, assistant_turns: usize) -> GuestRequest {
        let mut history = Vec::new();
        for i in 0..assistant_turns {
            history.push(Message::assistant("", vec![]));
            history.push(Message::tool_result(format!("id{i}"), "ok"));
        }
        let msgs = assemble_context(
            &Mission::new(mission).unwrap(),
            &WisdomMap::new(generation),
            &history,
            MaterialStatus::Absent,
        );
        GuestRequest::new(msgs, "mock", 1024)
    }

    fn script() -> MockScript {
        MockScript {
            rules: vec![
                MockRule::new("count", vec![MockResponse::sh("echo 1"), MockResponse::exit(0)]),
                MockRule {
                    pattern: "^renew$".into(),
                    responses: vec![MockResponse::exit(9)],
                    generations: vec![vec![MockResponse::call("exec", json!({"wisdom": {"a": "1"}}))]],
                },
            ],
        }
    }

    #[test]
    fn scripted_sequence() {
        let g = MockGuest::from_script(script()).unwrap();
        let r0 = g.complete(&request("please count", 0, 0)).unwrap();
        assert_eq!(r0.tool_calls[0].name, "sh");
        assert_eq!(r0.tool_calls[0].arguments, r#"{"command":"echo 1"}"#);
        let r1 = g.complete(&request("please count", 0, 1)).unwrap();
        assert_eq!(r1.tool_calls[0].name, "exit");
        assert_eq!(r1.tool_calls[0].arguments, r#"{"status":0}"#);
    }

    #[test]
    fn exhaustion_and_no_match_exit_one() {
        let g = MockGuest::from_script(script()).unwrap();
        for req in [request("please count", 0, 2), request("unrelated", 0, 0)] {
            let r = g.complete(&req).unwrap();
            assert_eq!(r.tool_calls.len(), 1);
            assert_eq!(r.tool_calls[0].name, "exit");
            let v: Value = serde_json::from_str(&r.tool_calls[0].arguments).unwrap();
            assert_eq!(v["status"], 1);
        }
    }

    #[test]
    fn generation_selects_plan() {
        let g = MockGuest::from_script(script()).unwrap();
        assert_eq!(g.complete(&request("renew", 0, 0)).unwrap().tool_calls[0].name, "exec");
        let later = g.complete(&request("renew", 1, 0)).unwrap();
        assert_eq!(later.tool_calls[0].arguments, r#"{"status":9}"#);
    }

    #[test]
    fn identical_requests_identical_responses() {
        let g = MockGuest::from_script(script()).unwrap();
        let req = request("please count", 0, 1);
        let a = serde_json::to_vec(&g.complete(&req).unwrap()).unwrap();
        let b = serde_json::to_vec(&g.complete(&req).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_usage_scales_with_messages() {
        let g = MockGuest::from_script(script()).unwrap();
        let u0 = g.complete(&request("please count", 0, 0)).unwrap().usage.unwrap();
        let u1 = g.complete(&request("please count", 0, 1)).unwrap().usage.unwrap();
        assert_eq!(u0.input_tokens, 2 * MOCK_TOKENS_PER_MESSAGE);
        assert_eq!(u1.input_tokens, 4 * MOCK_TOKENS_PER_MESSAGE);
    }

    #[test]
    fn load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        script().write(&p).unwrap();
        let g = MockGuest::load(&p).unwrap();
        assert_eq!(g.script, script());
        std::fs::write(&p, r#"{"rules":[{"match":"(","responses":[]}]}"#).unwrap();
        assert!(matches!(MockGuest::load(&p), Err(Error::MockScript { .. })));
        std::fs::write(&p, r#"{"rules":[], "extra": 1}"#).unwrap();
        assert!(MockGuest::load(&p).is_err());
    }
}
