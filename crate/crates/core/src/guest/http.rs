use std::thread;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{Guest, GuestRequest, GuestResponse, HttpConfig, RawToolCall, Usage};
use crate::error::{Error, Result};
use crate::protocol::{Message, Role};

/// Chat-completions provider with bounded exponential-backoff retries.
pub struct HttpGuest {
    config: HttpConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(GuestResponse),
    Transient(String),
    Fatal(Error),
}

impl HttpGuest {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.request_timeout))
            .build()
            .into();
        HttpGuest { config, agent }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .agent
            .post(self.endpoint())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        match status {
            200..=299 => match decode_response(&text) {
                Ok(r) => Attempt::Done(r),
                Err(e) => Attempt::Fatal(e),
            },
            408 | 429 | 500..=599 => Attempt::Transient(format!("HTTP {status}: {}", snippet(&text))),
            _ => Attempt::Fatal(Error::ProviderExhausted {
                attempts: 1,
                last: format!("HTTP {status}: {}", snippet(&text)),
            }),
        }
    }
}

fn snippet(s: &str) -> &str {
    let end = s.char_indices().nth(200).map(|(i, _)| i).unwrap_or(s.len());
    &s[..end]
}

impl Guest for HttpGuest {
    fn complete(&self, request: &GuestRequest) -> Result<GuestResponse> {
        let body = encode_request(request).to_string();
        let attempts = self.config.max_retries + 1;
        let mut backoff = self.config.initial_backoff;
        let mut last = String::new();
        for n in 0..attempts {
            if n > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(&body) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(msg) => last = msg,
            }
        }
        Err(Error::ProviderExhausted { attempts, last })
    }
}

fn encode_message(m: &Message) -> Value {
    match m.role {
        Role::System => json!({"role": "system", "content": m.content}),
        Role::User => json!({"role": "user", "content": m.content}),
        Role::Assistant => {
            let mut v = json!({
                "role": "assistant",
                "content": if m.content.is_empty() { Value::Null } else { Value::String(m.content.clone()) },
            });
            if !m.tool_calls.is_empty() {
                v["tool_calls"] = m
                    .tool_calls
                    .iter()
                    .map(|tc| {
                        json!({
                            "id": tc.id,
                            "type": "function",
                            "function": {"name": tc.name, "arguments": tc.arguments},
                        })
                    })
                    .collect();
            }
            v
        }
        Role::ToolResult => json!({
            "role": "tool",
            "tool_call_id": m.tool_call_id.clone().unwrap_or_default(),
            "content": m.content,
        }),
    }
}

/// Serializes a request into the chat-completions-with-tools wire form.
pub(crate) fn encode_request(req: &GuestRequest) -> Value {
    json!({
        "model": req.model_id,
        "max_tokens": req.max_output_tokens,
        "messages": req.messages.iter().map(encode_message).collect::<Vec<_>>(),
        "tools": req.tool_schemas.iter().map(|t| json!({
            "type": "function",
            "function": {"name": t.name, "description": t.description, "parameters": t.parameters},
        })).collect::<Vec<_>>(),
        "tool_choice": "auto",
    })
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
    #[serde(default)]
    tool_calls: Vec<WireToolCall>,
}

#[derive(Deserialize)]
struct WireToolCall {
    id: String,
    function: WireFunction,
}

#[derive(Deserialize)]
struct WireFunction {
    name: String,
    #[serde(default)]
    arguments: Value,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

pub(crate) fn decode_response(text: &str) -> Result<GuestResponse> {
    let wire: WireResponse = serde_json::from_str(text).map_err(|e| Error::Decode(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::Decode("response has no choices".into()))?;
    Ok(GuestResponse {
        assistant_text: choice.message.content.filter(|c| !c.is_empty()),
        tool_calls: choice
            .message
            .tool_calls
            .into_iter()
            .map(|tc| RawToolCall {
                id: tc.id,
                name: tc.function.name,
                arguments: match tc.function.arguments {
                    Value::String(s) => s,
                    Value::Null => "{}".into(),
                    other => other.to_string(),
                },
            })
            .collect(),
        usage: wire.usage.map(|u| Usage {
            input_tokens: u.prompt_tokens.unwrap_or(0),
            output_tokens: u.completion_tokens.unwrap_or(0),
        }),
    })
}
