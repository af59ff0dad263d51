//! The Guest: a stateless oracle that maps a context to tool invocations.
//!
//! Two providers exist. [`HttpGuest`] speaks the chat-completions-with-tools
//! wire form to any compatible endpoint; [`MockGuest`] replays a scripted
//! plan so whole process trees can run offline and deterministically.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::protocol::Message;

mod http;
mod mock;

pub use http::HttpGuest;
pub use mock::{MockGuest, MockResponse, MockRule, MockScript, MockToolCall};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawToolCall {
    pub id: String,
    pub name: String,
    /// Raw JSON object text, decoded later by the protocol layer.
    pub arguments: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestResponse {
    pub assistant_text: Option<String>,
    pub tool_calls: Vec<RawToolCall>,
    pub usage: Option<Usage>,
}

impl GuestResponse {
    /// A response carrying a single `exit` call.
    pub fn exit(id: impl Into<String>, status: u8, message: &str) -> Self {
        GuestResponse {
            assistant_text: None,
            tool_calls: vec![RawToolCall {
                id: id.into(),
                name: "exit".into(),
                arguments: json!({ "status": status, "message": message }).to_string(),
            }],
            usage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuestRequest {
    pub messages: Vec<Message>,
    pub tool_schemas: Vec<ToolSchema>,
    pub model_id: String,
    pub max_output_tokens: u32,
}

impl GuestRequest {
    pub fn new(messages: Vec<Message>, model_id: impl Into<String>, max_output_tokens: u32) -> Self {
        GuestRequest {
            messages,
            tool_schemas: tool_schemas(),
            model_id: model_id.into(),
            max_output_tokens,
        }
    }
}

/// Declarations of `sh`, `fork`, `exec` and `exit`, in that order.
pub fn tool_schemas() -> Vec<ToolSchema> {
    let schema = |name: &str, description: &str, parameters: Value| ToolSchema {
        name: name.into(),
        description: description.into(),
        parameters,
    };
    vec![
        schema(
            "sh",
            "Run `sh -c <command>` and return its own stdout, stderr and exit status. \
             fd 3 reads material (stdin), fd 4 writes the deliverable (stdout), fd 5 writes diagnostics (stderr).",
            json!({
                "type": "object",
                "properties": {
                    "command": {"type": "string"},
                    "timeout_s": {"type": "integer", "minimum": 1}
                },
                "required": ["command"],
                "additionalProperties": false
            }),
        ),
        schema(
            "fork",
            "Spawn child Quine processes, each with its own mission (argv) and optional stdin text. \
             Blocks until all finish unless wait is false.",
            json!({
                "type": "object",
                "properties": {
                    "children": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "properties": {
                                "argv": {"type": "string"},
                                "stdin": {"type": "string"}
                            },
                            "required": ["argv"],
                            "additionalProperties": false
                        }
                    },
                    "wait": {"type": "boolean"}
                },
                "required": ["children"],
                "additionalProperties": false
            }),
        ),
        schema(
            "exec",
            "Replace this process image to renew context. PID, mission and streams persist; \
             wisdom entries are carried to the next generation through environment variables.",
            json!({
                "type": "object",
                "properties": {
                    "wisdom": {
                        "type": "object",
                        "additionalProperties": {"type": "string"}
                    }
                },
                "required": ["wisdom"],
                "additionalProperties": false
            }),
        ),
        schema(
            "exit",
            "Terminate with a status code 0-255 (0 means success), optionally writing a message to stderr.",
            json!({
                "type": "object",
                "properties": {
                    "status": {"type": "integer", "minimum": 0, "maximum": 255},
                    "message": {"type": "string"}
                },
                "required": ["status"],
                "additionalProperties": false
            }),
        ),
    ]
}

/// Something that can answer a [`GuestRequest`].
pub trait Guest {
    fn complete(&self, request: &GuestRequest) -> Result<GuestResponse>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub api_base: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
}

impl HttpConfig {
    pub fn new(api_base: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            api_base: api_base.into(),
            api_key: None,
            model: model.into(),
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            request_timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderConfig {
    Mock { script: PathBuf },
    Http(HttpConfig),
}

impl ProviderConfig {
    pub fn model_id(&self) -> &str {
        match self {
            ProviderConfig::Mock { .. } => "mock",
            ProviderConfig::Http(h) => &h.model,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Guest>> {
        Ok(match self {
            ProviderConfig::Mock { script } => Box::new(MockGuest::load(script)?),
            ProviderConfig::Http(cfg) => Box::new(HttpGuest::new(cfg.clone())),
        })
    }
}

/// Issues one request through the configured provider.
pub fn complete(request: &GuestRequest, provider: &dyn Guest) -> Result<GuestResponse> {
    let resp = provider.complete(request)?;
    let mut seen = std::collections::HashSet::new();
    for tc in &resp.tool_calls {
        if !seen.insert(tc.id.as_str()) {
            return Err(Error::Decode(format!("duplicate tool call id {:?}", tc.id)));
        }
    }
    Ok(resp)
}
