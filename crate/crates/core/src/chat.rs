//! OpenAI-compatible chat-completions client.
//!
//! Requests are serialised by hand so the body bytes are stable:
//! `{"model", "messages": [{"role", "content"}], "temperature", "top_p"}`.
//! Retries use exponential backoff on 429, 5xx and transport failures.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use reqwest::header::{AUTHORIZATION, CONTENT_TYPE, RETRY_AFTER};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatBackendConfig {
    /// Base URL up to and including the API version, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. Keys are never
    /// stored in config files.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_rate_limit")]
    pub rate_limit_per_minute: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_top_p() -> f64 {
    1.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_rate_limit() -> u32 {
    60
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    500
}

impl ChatBackendConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            model: model.to_string(),
            api_key_env: None,
            temperature: 0.0,
            top_p: default_top_p(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
            rate_limit_per_minute: default_rate_limit(),
            max_in_flight: default_in_flight(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), ChatError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ChatError::Config("temperature must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(ChatError::Config("top_p must lie in [0, 1]".into()));
        }
        if self.rate_limit_per_minute < 1 {
            return Err(ChatError::Config("rate limit must be >= 1 request/minute".into()));
        }
        if self.max_in_flight < 1 {
            return Err(ChatError::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }

    /// A single-user-message request with this config's sampling parameters.
    pub fn request(&self, prompt: &str) -> ChatRequest {
        ChatRequest::user(&self.model, prompt, self.temperature, self.top_p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str, temperature: f64, top_p: f64) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature,
            top_p,
        }
    }

    /// Content of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serialises")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChatError {
    #[error("invalid chat backend config: {0}")]
    Config(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ChatError> },
}

impl ChatError {
    fn retryable(&self) -> bool {
        match self {
            ChatError::Transport(_) => true,
            ChatError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Anything that answers a chat request with the assistant's text.
pub trait ChatClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, ChatError>;
}

/// Spaces request starts at least `60 / rpm` seconds apart.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn per_minute(rpm: u32) -> Self {
        Self {
            interval: Duration::from_secs_f64(60.0 / f64::from(rpm.max(1))),
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub struct HttpChatClient {
    config: ChatBackendConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    limiter: RateLimiter,
}

impl HttpChatClient {
    pub fn new(config: ChatBackendConfig) -> Result<Self, ChatError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ChatError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ChatError::Transport(e.to_string()))?;
        let limiter = RateLimiter::per_minute(config.rate_limit_per_minute);
        Ok(Self {
            config,
            api_key,
            http,
            limiter,
        })
    }

    pub fn config(&self) -> &ChatBackendConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &[u8]) -> Result<String, (ChatError, Option<Duration>)> {
        self.limiter.acquire();
        let mut req = self
            .http
            .post(self.endpoint())
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.header(AUTHORIZATION, format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| (ChatError::Transport(e.to_string()), None))?;
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(|s| Duration::from_secs(s.min(60)));
        let text = resp.text().map_err(|e| (ChatError::Transport(e.to_string()), None))?;
        if !status.is_success() {
            return Err((
                ChatError::Status {
                    status: status.as_u16(),
                    body: text,
                },
                retry_after,
            ));
        }
        parse_completion(&text).map_err(|e| (e, None))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<String, ChatError> {
        let body = req.body();
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((err, retry_after)) => {
                    if !err.retryable() {
                        return Err(err);
                    }
                    log::warn!("chat request attempt {} failed: {err}", attempt + 1);
                    if attempt + 1 < attempts {
                        let backoff =
                            Duration::from_millis(self.config.backoff_base_ms.saturating_mul(1 << attempt.min(16)));
                        std::thread::sleep(retry_after.unwrap_or(backoff));
                    }
                    last = Some(err);
                }
            }
        }
        Err(ChatError::RetriesExhausted {
            attempts,
            last: Box::new(last.expect("at least one attempt")),
        })
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub fn parse_completion(text: &str) -> Result<String, ChatError> {
    let resp: CompletionResponse = serde_json::from_str(text).map_err(|e| ChatError::Malformed(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| ChatError::Malformed("no choices[0].message.content".into()))
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, ChatError> + Send + Sync;

/// In-process client driven by a closure. Logs every request it receives.
pub struct ScriptedClient {
    responder: Box<Responder>,
    log: Mutex<Vec<ChatRequest>>,
    calls: AtomicUsize,
}

impl ScriptedClient {
    pub fn new(responder: impl Fn(&ChatRequest) -> Result<String, ChatError> + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(responder),
            log: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Always replies with `text`.
    pub fn constant(text: &str) -> Self {
        let text = text.to_string();
        Self::new(move |_| Ok(text.clone()))
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, req: &ChatRequest) -> Result<String, ChatError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(req.clone());
        (self.responder)(req)
    }
}

/// Runs `f` over `items` on at most `workers` threads; output keeps input order.
pub fn run_bounded<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}
