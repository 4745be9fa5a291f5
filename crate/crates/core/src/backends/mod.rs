//! Clients for external model services (ASR, MT, LLM, QE, TTS, VAD).
//!
//! Every backend speaks JSON over HTTP POST to its own endpoint. Endpoints
//! with the `mock:` scheme are served in-process by deterministic mocks, so
//! whole pipelines run without a network. Both transports share the retry
//! loop and the response validation below.

mod http;
mod mock;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::segmentation::SpeechFrameTrack;

pub use mock::MOCK_SCHEME;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Asr,
    Mt,
    Llm,
    Qe,
    Tts,
    Vad,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            BackendKind::Asr => "asr",
            BackendKind::Mt => "mt",
            BackendKind::Llm => "llm",
            BackendKind::Qe => "qe",
            BackendKind::Tts => "tts",
            BackendKind::Vad => "vad",
        };
        f.write_str(name)
    }
}

fn default_timeout_s() -> f64 {
    60.0
}

fn default_max_retries() -> u32 {
    2
}

fn default_backoff_base_s() -> f64 {
    0.5
}

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub id: String,
    pub kind: BackendKind,
    pub endpoint: String,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    /// First retry delay; later delays double.
    #[serde(default = "default_backoff_base_s")]
    pub backoff_base_s: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl BackendSpec {
    pub fn new(id: impl Into<String>, kind: BackendKind, endpoint: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind,
            endpoint: endpoint.into(),
            timeout_s: default_timeout_s(),
            max_retries: default_max_retries(),
            headers: BTreeMap::new(),
            backoff_base_s: default_backoff_base_s(),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("backend id must be non-empty".into());
        }
        if !(self.timeout_s > 0.0) {
            return Err(format!("backend `{}`: timeout_s must be positive", self.id));
        }
        if !(self.backoff_base_s >= 0.0) {
            return Err(format!("backend `{}`: backoff_base_s must be non-negative", self.id));
        }
        if self.max_in_flight == 0 {
            return Err(format!("backend `{}`: max_in_flight must be at least 1", self.id));
        }
        Ok(())
    }

    /// Delay before retry `n` (1-based): `base * 2^(n-1)`, no jitter.
    pub fn backoff_delay(&self, retry: u32) -> Duration {
        let factor = 2f64.powi(retry.saturating_sub(1) as i32);
        Duration::from_secs_f64(self.backoff_base_s * factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCategory {
    Timeout,
    Protocol,
    Remote,
    Integrity,
    /// The call was rejected before reaching the backend.
    Precondition,
}

impl ErrorCategory {
    fn retryable(self) -> bool {
        matches!(self, ErrorCategory::Timeout | ErrorCategory::Remote)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("backend `{backend_id}` {category:?} error on attempt {attempt}: {message}")]
pub struct BackendError {
    pub backend_id: String,
    pub category: ErrorCategory,
    /// 1-based attempt that produced the error; 0 for precondition failures.
    pub attempt: u32,
    pub message: String,
}

/// Failure of a single attempt, before retry bookkeeping.
#[derive(Debug, Clone)]
pub(crate) struct AttemptError {
    pub category: ErrorCategory,
    pub message: String,
}

impl AttemptError {
    pub fn new(category: ErrorCategory, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }
}

#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

enum Transport {
    Http(http::HttpTransport),
    Mock(mock::MockTransport),
}

/// A configured backend. Safe to share across threads.
pub struct Backend {
    spec: BackendSpec,
    transport: Transport,
    attempts: AtomicU64,
    in_flight: InFlight,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend")
            .field("spec", &self.spec)
            .field("attempts", &self.attempts.load(Ordering::Relaxed))
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRequest {
    pub audio_path: String,
    pub start_s: f64,
    pub end_s: f64,
    pub lang: String,
    /// Whole-audio requests: spans whose encodings are concatenated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunks: Option<Vec<(f64, f64)>>,
    /// Whole-audio requests: the task instruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

impl AsrRequest {
    pub fn span(audio_path: &str, start_s: f64, end_s: f64, lang: &str) -> Self {
        Self {
            audio_path: audio_path.to_string(),
            start_s,
            end_s,
            lang: lang.to_string(),
            chunks: None,
            instruction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            max_tokens: 1024,
            temperature: 0.0,
            stop: Vec::new(),
        }
    }
}

#[derive(Serialize)]
struct MtRequest<'a> {
    source: &'a str,
    src_lang: &'a str,
    tgt_lang: &'a str,
}

#[derive(Serialize)]
struct LlmRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
}

#[derive(Serialize)]
struct QeRequest<'a> {
    source: &'a str,
    target: &'a str,
}

#[derive(Serialize)]
struct VadRequest<'a> {
    audio_path: &'a str,
}

#[derive(Serialize)]
struct TtsRequest<'a> {
    text: &'a str,
    voice: &'a str,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Deserialize)]
struct QeResponse {
    score: Value,
}

#[derive(Deserialize)]
struct VadResponse {
    frame_rate_hz: f64,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct TtsResponse {
    audio_path: String,
}

impl Backend {
    pub fn new(spec: BackendSpec) -> Result<Self, BackendError> {
        let precondition = |message: String| BackendError {
            backend_id: spec.id.clone(),
            category: ErrorCategory::Precondition,
            attempt: 0,
            message,
        };
        spec.validate().map_err(precondition)?;
        let transport = if let Some(rest) = spec.endpoint.strip_prefix(MOCK_SCHEME) {
            Transport::Mock(mock::MockTransport::parse(spec.kind, rest).map_err(precondition)?)
        } else if spec.endpoint.starts_with("http://") || spec.endpoint.starts_with("https://") {
            Transport::Http(http::HttpTransport::new(&spec))
        } else {
            return Err(precondition(format!(
                "unsupported endpoint `{}` (expected http(s):// or mock:)",
                spec.endpoint
            )));
        };
        let in_flight = InFlight::new(spec.max_in_flight);
        Ok(Self {
            spec,
            transport,
            attempts: AtomicU64::new(0),
            in_flight,
        })
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    /// Number of attempts sent to the backend so far (retries included).
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    fn error(&self, category: ErrorCategory, attempt: u32, message: impl Into<String>) -> BackendError {
        BackendError {
            backend_id: self.spec.id.clone(),
            category,
            attempt,
            message: message.into(),
        }
    }

    fn require_kind(&self, kind: BackendKind) -> Result<(), BackendError> {
        if self.spec.kind != kind {
            return Err(self.error(
                ErrorCategory::Precondition,
                0,
                format!("backend is `{}`, operation needs `{kind}`", self.spec.kind),
            ));
        }
        Ok(())
    }

    /// Sends `request`, retrying timeouts and remote failures with
    /// exponential backoff, and decodes the complete response as `T`.
    fn call<T: DeserializeOwned>(&self, request: &impl Serialize) -> Result<T, BackendError> {
        let body = serde_json::to_value(request).expect("request serializes");
        let _slot = self.in_flight.acquire();
        let max_attempts = self.spec.max_retries + 1;
        let mut attempt = 1;
        loop {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            let outcome = match &self.transport {
                Transport::Http(t) => t.post(&body),
                Transport::Mock(m) => m.handle(&body),
            };
            let failure = match outcome {
                Ok(value) => {
                    return serde_json::from_value(value).map_err(|e| {
                        self.error(ErrorCategory::Integrity, attempt, format!("malformed response: {e}"))
                    })
                }
                Err(e) => e,
            };
            if !failure.category.retryable() || attempt >= max_attempts {
                return Err(self.error(failure.category, attempt, failure.message));
            }
            let delay = self.spec.backoff_delay(attempt);
            log::debug!(
                "backend `{}` attempt {attempt} failed ({:?}: {}); retrying in {delay:?}",
                self.spec.id,
                failure.category,
                failure.message
            );
            std::thread::sleep(delay);
            attempt += 1;
        }
    }

    pub fn transcribe(&self, request: &AsrRequest) -> Result<Transcript, BackendError> {
        self.require_kind(BackendKind::Asr)?;
        if request.chunks.is_none() && !(request.start_s < request.end_s) {
            return Err(self.error(
                ErrorCategory::Precondition,
                0,
                format!("empty span [{}, {})", request.start_s, request.end_s),
            ));
        }
        self.call(request)
    }

    pub fn translate(&self, source: &str, src_lang: &str, tgt_lang: &str) -> Result<String, BackendError> {
        self.require_kind(BackendKind::Mt)?;
        let response: TextResponse = self.call(&MtRequest {
            source,
            src_lang,
            tgt_lang,
        })?;
        Ok(response.text)
    }

    /// Text completion. Output is cut at the first stop sequence even if the
    /// server ignored it.
    pub fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, BackendError> {
        self.require_kind(BackendKind::Llm)?;
        if !(params.temperature >= 0.0) {
            return Err(self.error(ErrorCategory::Precondition, 0, "temperature must be non-negative"));
        }
        let response: TextResponse = self.call(&LlmRequest {
            prompt,
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            stop: &params.stop,
        })?;
        Ok(truncate_at_stop(&response.text, &params.stop).to_string())
    }

    pub fn estimate_quality(&self, source: &str, target: &str) -> Result<f64, BackendError> {
        self.require_kind(BackendKind::Qe)?;
        let response: QeResponse = self.call(&QeRequest { source, target })?;
        // JSON has no NaN literal; servers emit it as a string or null
        let score = match &response.score {
            Value::Number(n) => n.as_f64(),
            Value::String(s) => s.parse::<f64>().ok(),
            _ => None,
        };
        match score {
            Some(s) if s.is_finite() => Ok(s),
            _ => Err(self.error(
                ErrorCategory::Integrity,
                1,
                format!("quality score is not a finite number: {}", response.score),
            )),
        }
    }

    pub fn detect_speech(&self, audio_path: &str, talk_id: &str) -> Result<SpeechFrameTrack, BackendError> {
        self.require_kind(BackendKind::Vad)?;
        let response: VadResponse = self.call(&VadRequest { audio_path })?;
        SpeechFrameTrack::new(talk_id, response.frame_rate_hz, response.probs)
            .map_err(|e| self.error(ErrorCategory::Integrity, 1, e.to_string()))
    }

    pub fn synthesize(&self, text: &str, voice: &str) -> Result<String, BackendError> {
        self.require_kind(BackendKind::Tts)?;
        if text.trim().is_empty() {
            return Err(self.error(ErrorCategory::Precondition, 0, "text to synthesize is empty"));
        }
        let response: TtsResponse = self.call(&TtsRequest { text, voice })?;
        Ok(response.audio_path)
    }
}

pub fn truncate_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

/// Text completion, as consumed by fusion and post-editing.
pub trait Completion: Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, BackendError>;
}

impl Completion for Backend {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, BackendError> {
        Backend::complete(self, prompt, params)
    }
}

/// Sentence translation, as consumed by APE data synthesis.
pub trait Translation: Sync {
    fn translate(&self, source: &str, src_lang: &str, tgt_lang: &str) -> Result<String, BackendError>;
}

impl Translation for Backend {
    fn translate(&self, source: &str, src_lang: &str, tgt_lang: &str) -> Result<String, BackendError> {
        Backend::translate(self, source, src_lang, tgt_lang)
    }
}

/// All configured backends, keyed by id.
#[derive(Debug, Default, Clone)]
pub struct BackendSet {
    backends: BTreeMap<String, Arc<Backend>>,
}

impl BackendSet {
    pub fn from_specs(specs: &[BackendSpec]) -> Result<Self, BackendError> {
        let mut backends = BTreeMap::new();
        for spec in specs {
            if backends.contains_key(&spec.id) {
                return Err(BackendError {
                    backend_id: spec.id.clone(),
                    category: ErrorCategory::Precondition,
                    attempt: 0,
                    message: "duplicate backend id".into(),
                });
            }
            backends.insert(spec.id.clone(), Arc::new(Backend::new(spec.clone())?));
        }
        Ok(Self { backends })
    }

    pub fn get(&self, id: &str) -> Option<&Arc<Backend>> {
        self.backends.get(id)
    }

    /// First backend of `kind` in id order.
    pub fn first_of(&self, kind: BackendKind) -> Option<&Arc<Backend>> {
        self.backends.values().find(|b| b.spec.kind == kind)
    }

    pub fn total_attempts(&self) -> u64 {
        self.backends.values().map(|b| b.attempts()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Backend>> {
        self.backends.values()
    }
}
