//! Chat-completion backends.
//!
//! [`HttpBackend`] speaks the common JSON chat-completion shape against a
//! configurable base URL. [`MockBackend`] replays a [`Transcript`] and is
//! what every test and offline demo runs on. Calls go through [`Llm`], which
//! records each one in a [`RunLog`].

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::TemplateId;

pub const DEFAULT_MAX_TOKENS: u32 = 256;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

pub const ENV_BASE_URL: &str = "KGFORGE_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "KGFORGE_LLM_API_KEY";
pub const ENV_MODEL: &str = "KGFORGE_LLM_MODEL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("request failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("transcript has no matching entry for {tag} prompt starting {head:?}")]
    NoMatchingEntry { tag: TemplateId, head: String },
    #[error("missing credential: set {0}")]
    CredentialMissing(&'static str),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// The template that produced the prompt; doubles as the accounting tag.
    pub tag: TemplateId,
}

impl CompletionRequest {
    pub fn new(tag: TemplateId, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            tag,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_tokens < 1 {
            return Err(LlmError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;

    /// Whether a call can reach the network.
    fn is_remote(&self) -> bool {
        false
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}

// ---------------------------------------------------------------------------
// Mock

/// Selects which requests a transcript entry answers.
///
/// In a transcript file a bare string is a template id when it names one
/// (`"select_action"`), and a prompt substring otherwise. The object form
/// `{"template": ..., "contains": ...}` requires both conditions it names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Matcher {
    Text(String),
    Spec {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        template: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        contains: Option<String>,
    },
}

impl Matcher {
    pub fn template(id: TemplateId) -> Self {
        Matcher::Text(id.as_str().to_string())
    }

    pub fn contains(text: impl Into<String>) -> Self {
        Matcher::Spec {
            template: None,
            contains: Some(text.into()),
        }
    }

    pub fn both(id: TemplateId, text: impl Into<String>) -> Self {
        Matcher::Spec {
            template: Some(id.as_str().to_string()),
            contains: Some(text.into()),
        }
    }

    pub fn matches(&self, request: &CompletionRequest) -> bool {
        match self {
            Matcher::Text(s) => match s.parse::<TemplateId>() {
                Ok(id) => id == request.tag,
                Err(_) => request.prompt.contains(s.as_str()),
            },
            Matcher::Spec { template, contains } => {
                template.as_deref().is_none_or(|t| t == request.tag.as_str())
                    && contains
                        .as_deref()
                        .is_none_or(|c| request.prompt.contains(c))
            }
        }
    }
}

fn default_once() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub response: String,
    #[serde(default = "default_once")]
    pub once: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a consume-once entry.
    pub fn then(mut self, matcher: Matcher, response: impl Into<String>) -> Self {
        self.entries.push(TranscriptEntry {
            matcher,
            response: response.into(),
            once: true,
        });
        self
    }

    /// Appends an entry that answers any number of times.
    pub fn always(mut self, matcher: Matcher, response: impl Into<String>) -> Self {
        self.entries.push(TranscriptEntry {
            matcher,
            response: response.into(),
            once: false,
        });
        self
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map_err(|e| LlmError::Config(format!("transcript: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Replays a transcript: each request gets the first entry that matches
/// and has not been consumed.
#[derive(Debug)]
pub struct MockBackend {
    transcript: Arc<Transcript>,
    consumed: Mutex<Vec<bool>>,
}

impl MockBackend {
    pub fn new(transcript: impl Into<Arc<Transcript>>) -> Self {
        let transcript = transcript.into();
        let consumed = Mutex::new(vec![false; transcript.entries.len()]);
        MockBackend {
            transcript,
            consumed,
        }
    }

    /// A new backend over the same transcript with nothing consumed.
    pub fn fresh(&self) -> Self {
        MockBackend::new(self.transcript.clone())
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        let mut consumed = self.consumed.lock().unwrap();
        let hit = self
            .transcript
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| !consumed[*i] && e.matcher.matches(request));
        match hit {
            Some((i, entry)) => {
                if entry.once {
                    consumed[i] = true;
                }
                Ok(entry.response.clone())
            }
            None => Err(LlmError::NoMatchingEntry {
                tag: request.tag,
                head: request.prompt.chars().take(60).collect(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
    model: String,
    max_retries: u32,
    backoff: Duration,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponseBody {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        model: impl Into<String>,
    ) -> Result<Self, LlmError> {
        let api_key = api_key.into();
        if api_key.is_empty() {
            return Err(LlmError::CredentialMissing(ENV_API_KEY));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpBackend {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            max_retries: 3,
            backoff: Duration::from_millis(500),
        })
    }

    /// Reads `KGFORGE_LLM_BASE_URL`, `KGFORGE_LLM_API_KEY` and
    /// `KGFORGE_LLM_MODEL`.
    pub fn from_env() -> Result<Self, LlmError> {
        let var = |k: &'static str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let base = var(ENV_BASE_URL).ok_or(LlmError::Config(format!("{ENV_BASE_URL} is not set")))?;
        let key = var(ENV_API_KEY).ok_or(LlmError::CredentialMissing(ENV_API_KEY))?;
        let model = var(ENV_MODEL).ok_or(LlmError::Config(format!("{ENV_MODEL} is not set")))?;
        Self::new(base, key, model)
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<String, Attempt> {
        let body = ChatRequestBody {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            max_tokens: request.max_tokens,
            temperature: request.temperature,
        };
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponseBody = resp
            .json()
            .map_err(|e| Attempt::Fatal(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal("response has no message content".into()))
    }
}

enum Attempt {
    Transient(String),
    Fatal(String),
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(msg)) => return Err(LlmError::Rejected(msg)),
                Err(Attempt::Transient(msg)) => {
                    log::warn!("llm attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(LlmError::RetriesExhausted {
            attempts: self.max_retries + 1,
            last,
        })
    }

    fn is_remote(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Accounting

#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub tag: TemplateId,
    /// 0 for the first try of a prompt, then 1, 2, ... for parse retries.
    pub attempt: u32,
    pub prompt: String,
    pub response: Result<String, LlmError>,
    pub latency: Duration,
}

/// Append-only log of every model call made during one run.
#[derive(Debug, Default)]
pub struct RunLog {
    calls: Mutex<Vec<CallRecord>>,
}

impl RunLog {
    pub fn push(&self, record: CallRecord) {
        self.calls.lock().unwrap().push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every call with this tag, retries included.
    pub fn calls(&self, tag: TemplateId) -> usize {
        self.calls.lock().unwrap().iter().filter(|c| c.tag == tag).count()
    }

    /// Distinct prompt invocations with this tag (first attempts only).
    pub fn invocations(&self, tag: TemplateId) -> usize {
        self.calls
            .lock()
            .unwrap()
            .iter()
            .filter(|c| c.tag == tag && c.attempt == 0)
            .count()
    }
}

/// A backend bound to a run log and generation settings.
pub struct Llm {
    backend: Box<dyn ChatBackend>,
    log: RunLog,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Llm {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Llm::boxed(Box::new(backend))
    }

    pub fn boxed(backend: Box<dyn ChatBackend>) -> Self {
        Llm {
            backend,
            log: RunLog::default(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn complete(&self, tag: TemplateId, prompt: &str, attempt: u32) -> Result<String, LlmError> {
        let request = CompletionRequest {
            prompt: prompt.to_string(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            tag,
        };
        let start = Instant::now();
        let response = self.backend.complete(&request);
        self.log.push(CallRecord {
            tag,
            attempt,
            prompt: request.prompt,
            response: response.clone(),
            latency: start.elapsed(),
        });
        response
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn is_remote(&self) -> bool {
        self.backend.is_remote()
    }
}
