//! Language-model clients: an HTTP endpoint client and deterministic mocks.

use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::LmError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl LmRequest {
    pub fn new(prompt: impl Into<String>, params: &DecodingParams) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmResponse {
    pub text: String,
    pub finish_reason: Option<String>,
}

impl LmResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 128,
        }
    }
}

/// A text generator. Implementations must be safe to share across threads.
pub trait LmClient: Send + Sync {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError>;
}

impl<T: LmClient + ?Sized> LmClient for &T {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        (**self).generate(request)
    }
}

impl<T: LmClient + ?Sized> LmClient for Box<T> {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        (**self).generate(request)
    }
}

/// Returns the last speaker line before the first blank line of the prompt,
/// with `marker` inserted after the speaker prefix. With an empty marker it
/// reproduces the templatized turn unchanged.
#[derive(Clone, Debug, Default)]
pub struct EchoLm {
    pub marker: String,
}

impl EchoLm {
    pub fn new(marker: impl Into<String>) -> Self {
        Self { marker: marker.into() }
    }
}

impl LmClient for EchoLm {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        let head = request.prompt.split("\n\n").next().unwrap_or("");
        let line = head
            .lines()
            .last()
            .ok_or_else(|| LmError::Malformed("prompt has no conversation".into()))?;
        let text = match line.split_once(": ") {
            Some((speaker, rest)) => format!("{speaker}: {}{rest}", self.marker),
            None => format!("{}{line}", self.marker),
        };
        Ok(LmResponse::text(text))
    }
}

/// Looks prompts up in a fixed table.
#[derive(Clone, Debug, Default)]
pub struct CannedLm {
    pub answers: HashMap<String, String>,
    pub default: Option<String>,
}

impl LmClient for CannedLm {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        self.answers
            .get(&request.prompt)
            .or(self.default.as_ref())
            .map(LmResponse::text)
            .ok_or_else(|| LmError::Malformed("no canned answer for prompt".into()))
    }
}

/// Plays back scripted results in call order, then defers to `fallback`.
pub struct ScriptedLm<C> {
    script: Mutex<VecDeque<Result<String, LmError>>>,
    fallback: C,
}

impl<C: LmClient> ScriptedLm<C> {
    pub fn new(script: impl IntoIterator<Item = Result<String, LmError>>, fallback: C) -> Self {
        Self {
            script: Mutex::new(script.into_iter().collect()),
            fallback,
        }
    }
}

impl<C: LmClient> LmClient for ScriptedLm<C> {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        let next = self.script.lock().expect("script lock").pop_front();
        match next {
            Some(r) => r.map(LmResponse::text),
            None => self.fallback.generate(request),
        }
    }
}

/// Wraps a client and keeps every prompt it was sent.
pub struct RecordingLm<C> {
    inner: C,
    prompts: Mutex<Vec<String>>,
}

impl<C: LmClient> RecordingLm<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log").clone()
    }
}

impl<C: LmClient> LmClient for RecordingLm<C> {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        self.prompts.lock().expect("prompt log").push(request.prompt.clone());
        self.inner.generate(request)
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    slots: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(n: usize) -> Self {
        Self {
            slots: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut slots = self.slots.lock().expect("in-flight lock");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("in-flight lock");
        }
        *slots -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.slots.lock().expect("in-flight lock") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub url: String,
    pub timeout_ms: u64,
    /// Retries after the first attempt for 429 and 5xx responses.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Environment variable holding the bearer token.
    pub token_env: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            timeout_ms: 30_000,
            max_retries: 4,
            backoff_ms: 500,
            max_in_flight: 8,
            token_env: "LM_API_TOKEN".into(),
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

/// Posts `{"prompt","temperature","max_tokens"}` and reads `{"text"}`.
pub struct HttpLmClient {
    config: HttpConfig,
    token: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl HttpLmClient {
    /// Fails before any request if the URL or the token is missing.
    pub fn new(config: HttpConfig) -> Result<Self, LmError> {
        let token = std::env::var(&config.token_env)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| LmError::Config(format!("environment variable {} is not set", config.token_env)))?;
        Self::with_token(config, token)
    }

    pub fn with_token(config: HttpConfig, token: String) -> Result<Self, LmError> {
        if config.url.is_empty() {
            return Err(LmError::Config("LM endpoint url is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let in_flight = InFlight::new(config.max_in_flight);
        Ok(Self {
            config,
            token,
            agent,
            in_flight,
        })
    }

    fn attempt(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        let body = serde_json::to_vec(request).map_err(|e| LmError::Malformed(e.to_string()))?;
        let _permit = self.in_flight.acquire();
        let mut resp = self
            .agent
            .post(&self.config.url)
            .header("Authorization", &format!("Bearer {}", self.token))
            .header("Content-Type", "application/json")
            .send(&body[..])
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => LmError::Timeout,
                other => LmError::Transport(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(LmError::Status { status });
        }
        let wire: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| LmError::Malformed(e.to_string()))?;
        Ok(LmResponse {
            text: wire.text,
            finish_reason: wire.finish_reason,
        })
    }
}

impl LmClient for HttpLmClient {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        if request.prompt.is_empty() {
            return Err(LmError::Config("prompt is empty".into()));
        }
        let mut delay = self.config.backoff_ms;
        let mut retries = 0;
        loop {
            match self.attempt(request) {
                Err(e @ LmError::Status { .. }) if e.is_retryable() && retries < self.config.max_retries => {
                    std::thread::sleep(Duration::from_millis(delay));
                    delay = delay.saturating_mul(2);
                    retries += 1;
                }
                other => return other,
            }
        }
    }
}
