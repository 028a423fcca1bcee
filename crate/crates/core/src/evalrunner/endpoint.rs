//! Model endpoints: scripted mocks and an HTTP chat-completion client.
//!
//! Wire format (request):
//!
//! ```json
//! {"model": "...", "temperature": 0.0, "max_tokens": 1024,
//!  "messages": [{"role": "system", "content": "..."},
//!               {"role": "user", "content": [
//!                   {"type": "text", "text": "SLICE 0"},
//!                   {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}}]}]}
//! ```
//!
//! The reply text is read from `choices[0].message.content`, which may be a
//! string or a list of `{"type": "text", "text": ...}` parts.

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::TaskKind;
use crate::promptforge::{Part, RenderedPrompt};

/// Environment variable holding the bearer token for HTTP endpoints.
pub const API_KEY_ENV: &str = "MEDHARNESS_API_KEY";

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CallError {
    #[error("transport failure after {attempts} attempts: {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("endpoint answered HTTP {status}: {excerpt}")]
    Endpoint { status: u16, excerpt: String },
    #[error("malformed endpoint response: {0}")]
    Response(String),
    #[error("cannot build request: {0}")]
    Request(String),
}

impl CallError {
    pub fn class(&self) -> &'static str {
        match self {
            CallError::Transport { .. } => "transport",
            CallError::Endpoint { .. } => "endpoint",
            CallError::Response(_) => "response",
            CallError::Request(_) => "request",
        }
    }
}

/// What the runner knows about a call besides the prompt. Mocks use the
/// canonical replies to script their answers; real endpoints ignore them.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub example_id: &'a str,
    pub condition: Option<&'a str>,
    pub task: TaskKind,
    /// A reply that earns the best possible score.
    pub gold_reply: &'a str,
    /// A reply that earns the worst possible score.
    pub wrong_reply: &'a str,
}

pub trait Endpoint: Send + Sync {
    fn generate(&self, prompt: &RenderedPrompt, ctx: &CallContext<'_>) -> Result<String, CallError>;

    /// Identification recorded in reports. Must not contain credentials.
    fn describe(&self) -> String;

    /// Settings recorded in reports.
    fn settings(&self) -> Value {
        Value::Null
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockResponder {
    /// Replies with the gold answer.
    Gold,
    /// Replies with a wrong answer.
    Wrong,
    /// Replies with an empty string.
    Empty,
    /// Replies with the prompt's text.
    Echo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEndpoint {
    pub responder: MockResponder,
}

impl MockEndpoint {
    pub fn new(responder: MockResponder) -> Self {
        Self { responder }
    }
}

impl Endpoint for MockEndpoint {
    fn generate(&self, prompt: &RenderedPrompt, ctx: &CallContext<'_>) -> Result<String, CallError> {
        Ok(match self.responder {
            MockResponder::Gold => ctx.gold_reply.to_string(),
            MockResponder::Wrong => ctx.wrong_reply.to_string(),
            MockResponder::Empty => String::new(),
            MockResponder::Echo => prompt.flat_text(),
        })
    }

    fn describe(&self) -> String {
        let name = match self.responder {
            MockResponder::Gold => "gold",
            MockResponder::Wrong => "wrong",
            MockResponder::Empty => "empty",
            MockResponder::Echo => "echo",
        };
        format!("mock:{name}")
    }
}

/// Retries apply to transport failures only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 500,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.max(1.0).powi(retry as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Sent as the `model` field when set.
    pub model: Option<String>,
    pub max_output_tokens: u32,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            model: None,
            max_output_tokens: 1024,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
        }
    }
}

fn image_part(png: &[u8]) -> Value {
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}})
}

/// Request body for a rendered prompt; images are read and inlined.
pub fn build_request_body(prompt: &RenderedPrompt, cfg: &EndpointConfig) -> Result<Value, CallError> {
    let mut content = Vec::with_capacity(prompt.parts.len());
    for part in &prompt.parts {
        match part {
            Part::Text(t) => content.push(json!({"type": "text", "text": t})),
            Part::Image(r) => {
                let png = r.load().map_err(|e| CallError::Request(format!("{}: {e}", r.key())))?;
                content.push(image_part(&png));
            }
        }
    }
    let mut messages = Vec::new();
    if let Some(sys) = &prompt.system_text {
        messages.push(json!({"role": "system", "content": sys}));
    }
    messages.push(json!({"role": "user", "content": content}));
    let mut body = json!({
        "messages": messages,
        "temperature": prompt.temperature,
        "max_tokens": cfg.max_output_tokens,
    });
    if let Some(model) = &cfg.model {
        body["model"] = json!(model);
    }
    Ok(body)
}

/// Reply text from a chat-completion response body.
pub fn parse_response_body(body: &str) -> Result<String, CallError> {
    let v: Value = serde_json::from_str(body).map_err(|e| CallError::Response(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| CallError::Response("no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect()),
        Value::Null => Ok(String::new()),
        other => Err(CallError::Response(format!("unexpected content {other}"))),
    }
}

fn excerpt(s: &str) -> String {
    const MAX: usize = 300;
    match s.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

pub struct HttpEndpoint {
    url: reqwest::Url,
    client: reqwest::blocking::Client,
    cfg: EndpointConfig,
    api_key: Option<String>,
}

impl HttpEndpoint {
    /// `base_url` may be a server root or the full `/chat/completions` URL.
    /// The bearer token, if any, is read from [`API_KEY_ENV`].
    pub fn new(base_url: &str, cfg: EndpointConfig) -> Result<Self, CallError> {
        let mut url = reqwest::Url::parse(base_url).map_err(|e| CallError::Request(format!("{base_url}: {e}")))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(CallError::Request(format!("unsupported scheme in {base_url}")));
        }
        if !url.path().ends_with("/chat/completions") {
            let path = format!("{}/chat/completions", url.path().trim_end_matches('/'));
            url.set_path(&path);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| CallError::Request(e.to_string()))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(Self { url, client, cfg, api_key })
    }

    fn attempt(&self, body: &Value) -> Result<reqwest::blocking::Response, reqwest::Error> {
        let mut req = self.client.post(self.url.clone()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        req.send()
    }
}

impl Endpoint for HttpEndpoint {
    fn generate(&self, prompt: &RenderedPrompt, _ctx: &CallContext<'_>) -> Result<String, CallError> {
        let body = build_request_body(prompt, &self.cfg)?;
        let attempts = self.cfg.retry.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.cfg.retry.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| CallError::Response(e.to_string()))?;
                    if !status.is_success() {
                        return Err(CallError::Endpoint { status: status.as_u16(), excerpt: excerpt(&text) });
                    }
                    return parse_response_body(&text);
                }
                Err(e) => {
                    log::warn!("request to {} failed (attempt {}/{attempts}): {e}", self.describe(), attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(CallError::Transport { attempts, reason: last })
    }

    fn describe(&self) -> String {
        let mut u = self.url.clone();
        let _ = u.set_username("");
        let _ = u.set_password(None);
        u.set_query(None);
        u.set_fragment(None);
        u.to_string()
    }

    fn settings(&self) -> Value {
        serde_json::to_value(&self.cfg).unwrap_or(Value::Null)
    }
}

/// Builds an endpoint from `mock:{gold,wrong,empty,echo}` or an HTTP(S) URL.
pub fn endpoint_from_spec(spec: &str, cfg: &EndpointConfig) -> Result<Box<dyn Endpoint>, String> {
    if let Some(name) = spec.strip_prefix("mock:") {
        let responder = match name {
            "gold" => MockResponder::Gold,
            "wrong" => MockResponder::Wrong,
            "empty" => MockResponder::Empty,
            "echo" => MockResponder::Echo,
            _ => return Err(format!("unknown mock responder {name:?} (expected gold, wrong, empty or echo)")),
        };
        return Ok(Box::new(MockEndpoint::new(responder)));
    }
    HttpEndpoint::new(spec, cfg.clone())
        .map(|e| Box::new(e) as Box<dyn Endpoint>)
        .map_err(|e| e.to_string())
}
