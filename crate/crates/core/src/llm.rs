//! A classifier backend speaking the chat-completions wire protocol:
//! `POST {base_url}/chat/completions` with a JSON body of model,
//! temperature, and system/user messages, reading
//! `choices[0].message.content` back.
//!
//! Transient failures (HTTP 429/5xx, timeouts, connection errors) are
//! retried with exponential backoff; an admission limiter caps the number
//! of in-flight requests; and every call leaves [`CallRecord`]s behind for
//! the audit trail. The HTTP layer sits behind [`ChatTransport`], so tests
//! script responses without a network.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    build_prompt, normalize_label, resolve_label_lines, CandidateLabel, ClassifierBackend,
    ClassifyError, ClassifyRequest, Decision, Mode, MultiLabelBackend, MultiLabelDecision,
};

pub const ENV_API_KEY: &str = "BLUEPRINT_API_KEY";
pub const ENV_ORG_ID: &str = "BLUEPRINT_ORG_ID";
pub const ENV_BASE_URL: &str = "BLUEPRINT_BASE_URL";

pub const DEFAULT_MODEL: &str = "gpt-4-1106-preview";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

const SYSTEM_PROMPT: &str =
    "You are a precise classification assistant. Follow the reply format exactly.";

/// Client configuration. Credentials default from the `BLUEPRINT_*`
/// environment variables so they stay off disk; any field can be
/// overridden afterwards.
#[derive(Clone)]
pub struct LlmConfig {
    pub base_url: String,
    pub api_key: String,
    pub organization_id: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First backoff delay; it doubles per attempt with ±20% jitter.
    pub backoff_base: Duration,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            api_key: String::new(),
            organization_id: None,
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            max_in_flight: 4,
            backoff_base: Duration::from_secs(1),
        }
    }
}

impl std::fmt::Debug for LlmConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &"<redacted>")
            .field("organization_id", &self.organization_id)
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("max_in_flight", &self.max_in_flight)
            .field("backoff_base", &self.backoff_base)
            .finish()
    }
}

impl LlmConfig {
    /// Defaults plus the `BLUEPRINT_API_KEY`, `BLUEPRINT_ORG_ID`, and
    /// `BLUEPRINT_BASE_URL` environment variables when set.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            cfg.api_key = key;
        }
        if let Ok(org) = std::env::var(ENV_ORG_ID) {
            if !org.is_empty() {
                cfg.organization_id = Some(org);
            }
        }
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            if !url.is_empty() {
                cfg.base_url = url;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.base_url.trim().is_empty() {
            return Err(LlmError::Config("base URL is empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max in-flight requests must be at least 1".into()));
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Audit record for one chat-completion call (or one failed attempt).
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub prompt: String,
    pub response: String,
    pub attempts: u32,
    pub latency: Duration,
    pub model: String,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("api error (status {status}): {body}")]
    Api { status: u16, body: String },
    #[error("no usable reply after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error("http client: {0}")]
    Http(String),
}

// --- wire types ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body for `POST {base_url}/chat/completions`.
#[derive(Debug, Clone, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

/// One HTTP attempt's outcome, before retry policy is applied.
#[derive(Debug, Clone)]
pub struct WireResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failure: {0}")]
    Connect(String),
}

/// The HTTP seam: one request in, one status+body out. Production uses
/// [`HttpTransport`]; tests substitute scripted implementations.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<WireResponse, TransportError>;
}

/// Blocking HTTP transport with bearer-token auth.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
    organization_id: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &LlmConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| LlmError::Http(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: cfg.endpoint(),
            api_key: cfg.api_key.clone(),
            organization_id: cfg.organization_id.clone(),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<WireResponse, TransportError> {
        let mut builder = self
            .client
            .post(&self.endpoint)
            .header("authorization", format!("Bearer {}", self.api_key))
            .json(request);
        if let Some(org) = &self.organization_id {
            builder = builder.header("openai-organization", org.clone());
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportError::Connect(e.to_string()))?;
        Ok(WireResponse { status, body })
    }
}

// --- admission limiter ---------------------------------------------------

struct Semaphore {
    available: Mutex<usize>,
    signal: Condvar,
}

struct Permit<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self { available: Mutex::new(permits), signal: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.signal.wait(available).unwrap();
        }
        *available -= 1;
        Permit { semaphore: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.semaphore.available.lock().unwrap() += 1;
        self.semaphore.signal.notify_one();
    }
}

// --- client ---------------------------------------------------------------

/// Shareable chat-completions classifier. Classification calls from any
/// number of threads are admitted up to `max_in_flight` at a time.
pub struct LlmClient {
    cfg: LlmConfig,
    transport: Box<dyn ChatTransport>,
    limiter: Semaphore,
    records: Mutex<Vec<CallRecord>>,
}

impl LlmClient {
    pub fn new(cfg: LlmConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let transport = Box::new(HttpTransport::new(&cfg)?);
        Self::with_transport(cfg, transport)
    }

    /// Builds a client over a custom transport (scripted responses,
    /// instrumentation).
    pub fn with_transport(
        cfg: LlmConfig,
        transport: Box<dyn ChatTransport>,
    ) -> Result<Self, LlmError> {
        cfg.validate()?;
        let limiter = Semaphore::new(cfg.max_in_flight);
        Ok(Self { cfg, transport, limiter, records: Mutex::new(Vec::new()) })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    /// The accumulated audit trail: one record per successful call, one
    /// per attempt for calls that exhausted their retries.
    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().unwrap().clone()
    }

    /// One single-label classification: build the prompt, complete it,
    /// normalize the reply against the candidates.
    pub fn classify_text(
        &self,
        text: &str,
        candidates: &[CandidateLabel],
        mode: Mode,
    ) -> Result<(Decision, CallRecord), LlmError> {
        let prompt = build_prompt(text, candidates, mode)?;
        let (content, record) = self.complete(&prompt)?;
        let chosen = normalize_label(&content, candidates)?;
        let decision = Decision {
            chosen,
            raw_output: content,
            candidates_offered: candidates.iter().map(|c| c.name.clone()).collect(),
            mode,
        };
        Ok((decision, record))
    }

    /// One multi-label classification: the reply may name between 0 and
    /// `max_labels` candidates, one per line. Off-menu lines are dropped
    /// (and recorded on the decision), not fatal.
    pub fn classify_text_multi(
        &self,
        text: &str,
        candidates: &[CandidateLabel],
        max_labels: usize,
    ) -> Result<(MultiLabelDecision, CallRecord), LlmError> {
        if candidates.is_empty() {
            return Err(ClassifyError::NoCandidates.into());
        }
        if max_labels == 0 || max_labels > candidates.len() {
            return Err(ClassifyError::InvalidMaxLabels {
                max: max_labels,
                candidates: candidates.len(),
            }
            .into());
        }
        let prompt = build_multi_prompt(text, candidates, max_labels);
        let (content, record) = self.complete(&prompt)?;
        Ok((resolve_label_lines(&content, candidates, max_labels), record))
    }

    /// Sends one prompt through the retry loop and returns the assistant
    /// reply content.
    fn complete(&self, prompt: &str) -> Result<(String, CallRecord), LlmError> {
        let _permit = self.limiter.acquire();
        let request = ChatRequest {
            model: self.cfg.model.clone(),
            temperature: self.cfg.temperature,
            messages: vec![
                ChatMessage { role: "system".into(), content: SYSTEM_PROMPT.into() },
                ChatMessage { role: "user".into(), content: prompt.to_string() },
            ],
        };

        let started = Instant::now();
        let mut attempt_log: Vec<String> = Vec::new();
        loop {
            let attempt = attempt_log.len() as u32 + 1;
            let outcome = self.transport.send(&request);
            let retryable = match outcome {
                Ok(reply) if reply.status == 200 => {
                    let content = parse_content(&reply.body)?;
                    let record = CallRecord {
                        prompt: prompt.to_string(),
                        response: content.clone(),
                        attempts: attempt,
                        latency: started.elapsed(),
                        model: self.cfg.model.clone(),
                    };
                    self.records.lock().unwrap().push(record.clone());
                    return Ok((content, record));
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    self.log_failed_attempts(prompt, &attempt_log, &format!("status {}", reply.status), started);
                    return Err(LlmError::Auth { status: reply.status });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    format!("status {}: {}", reply.status, reply.body)
                }
                Ok(reply) => {
                    self.log_failed_attempts(prompt, &attempt_log, &format!("status {}", reply.status), started);
                    return Err(LlmError::Api { status: reply.status, body: reply.body });
                }
                Err(e) => e.to_string(),
            };

            attempt_log.push(retryable.clone());
            if attempt > self.cfg.max_retries {
                self.log_failed_attempts(prompt, &attempt_log, &retryable, started);
                return Err(LlmError::RetriesExhausted { attempts: attempt, last: retryable });
            }
            std::thread::sleep(backoff_delay(self.cfg.backoff_base, attempt));
        }
    }

    fn log_failed_attempts(
        &self,
        prompt: &str,
        attempt_log: &[String],
        last: &str,
        started: Instant,
    ) {
        let mut records = self.records.lock().unwrap();
        let logged = if attempt_log.is_empty() { &[last.to_string()][..] } else { attempt_log };
        for (i, failure) in logged.iter().enumerate() {
            records.push(CallRecord {
                prompt: prompt.to_string(),
                response: format!("<failed: {failure}>"),
                attempts: i as u32 + 1,
                latency: started.elapsed(),
                model: self.cfg.model.clone(),
            });
        }
    }
}

fn parse_content(body: &str) -> Result<String, LlmError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|choice| choice.message.content)
        .ok_or_else(|| LlmError::MalformedResponse("response carries no choices".into()))
}

/// Exponential backoff with ±20% jitter: `base * 2^(attempt-1)`.
fn backoff_delay(base: Duration, attempt: u32) -> Duration {
    use rand::Rng;
    let exponential = base.as_secs_f64() * f64::from(2u32.saturating_pow(attempt.saturating_sub(1)));
    let jitter = rand::rng().random_range(0.8..=1.2);
    Duration::from_secs_f64(exponential * jitter)
}

/// Prompt for a multi-label decision: same candidate presentation as the
/// single-label prompt, but the reply may hold up to `max_labels` names,
/// one per line, or be empty when nothing applies.
pub fn build_multi_prompt(
    text: &str,
    candidates: &[CandidateLabel],
    max_labels: usize,
) -> String {
    let mut prompt = String::new();
    prompt.push_str("Assign the text up to the given number of candidate categories.\n");
    prompt.push_str("\nCandidates:\n");
    for candidate in candidates {
        prompt.push_str("- \"");
        prompt.push_str(&candidate.name);
        prompt.push('"');
        if let Some(definition) = &candidate.definition {
            prompt.push_str(", Definition: ");
            prompt.push_str(definition);
        }
        prompt.push('\n');
    }
    prompt.push_str("\nText: ");
    prompt.push_str(text);
    prompt.push_str(&format!(
        "\n\nReply with between 0 and {max_labels} candidate names, one per line and nothing \
         else. Reply with an empty message if no candidate applies.\n"
    ));
    prompt
}

impl ClassifierBackend for LlmClient {
    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Decision, ClassifyError> {
        match self.classify_text(request.text, request.candidates, request.mode) {
            Ok((decision, _)) => Ok(decision),
            Err(LlmError::Classify(e)) => Err(e),
            Err(other) => Err(ClassifyError::Backend(other.to_string())),
        }
    }
}

impl MultiLabelBackend for LlmClient {
    fn classify_multi(
        &self,
        text: &str,
        candidates: &[CandidateLabel],
        max_labels: usize,
    ) -> Result<MultiLabelDecision, ClassifyError> {
        match self.classify_text_multi(text, candidates, max_labels) {
            Ok((decision, _)) => Ok(decision),
            Err(LlmError::Classify(e)) => Err(e),
            Err(other) => Err(ClassifyError::Backend(other.to_string())),
        }
    }
}
