//! Multimodal chat client: prompt assembly for target captions and grid
//! reranking, an OpenAI-compatible HTTP backend, and a deterministic mock.
//!
//! The mock is selected with an endpoint of the form `mock:<mode>`:
//!
//! | endpoint              | caption reply           | rerank reply             |
//! |-----------------------|-------------------------|--------------------------|
//! | `mock:echo`           | `TARGET: <modification>`| `[0, 1, …, k-1]`         |
//! | `mock:identity`       | same as echo            | `[0, 1, …, k-1]`         |
//! | `mock:reverse`        | same as echo            | `[k-1, …, 0]`            |
//! | `mock:fixed:<text>`   | `<text>`                | `<text>`                 |
//! | `mock:script:<path>`  | `captions[query_id]`    | `rerank[query_id]`       |
//!
//! Script files are JSON `{"captions": {...}, "rerank": {...}}`; queries not
//! listed fall back to echo / identity.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

const CAPTION_TEMPLATE: &str = include_str!("../assets/prompts/caption.toml");
const RERANK_TEMPLATE: &str = include_str!("../assets/prompts/rerank.toml");
const RERANK_CAPTION_TEMPLATE: &str = include_str!("../assets/prompts/rerank_caption_intent.toml");

pub const DEFAULT_REFUSAL_MARKERS: &[&str] = &[
    "i can't",
    "i cannot",
    "i'm sorry",
    "i am sorry",
    "i'm unable",
    "i am unable",
    "can't assist",
    "cannot assist",
    "can't help with",
    "content policy",
    "against my guidelines",
];

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MllmConfig {
    /// Base URL of an OpenAI-compatible server (`…/v1`), a full
    /// `…/chat/completions` URL, or `mock:<mode>`.
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_inflight: usize,
    /// First backoff delay; doubles per attempt, plus up to 50% jitter.
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub max_tokens: Option<u32>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub refusal_markers: Vec<String>,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o".into(),
            temperature: DEFAULT_TEMPERATURE,
            timeout_secs: 120.0,
            max_retries: 3,
            max_inflight: 8,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            max_tokens: None,
            api_key_env: "OPENAI_API_KEY".into(),
            refusal_markers: DEFAULT_REFUSAL_MARKERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl MllmConfig {
    pub fn mock(mode: &str) -> Self {
        Self {
            endpoint_url: format!("mock:{mode}"),
            model_name: "mock".into(),
            backoff_base_ms: 1,
            backoff_max_ms: 5,
            ..Self::default()
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint_url.starts_with("mock:")
    }
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Caption,
    Rerank,
    RerankCaptionIntent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShot {
    pub reference: String,
    pub modification: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub version: String,
    pub system_text: String,
    #[serde(default)]
    pub few_shot: Vec<FewShot>,
    #[serde(default)]
    pub rules: Vec<String>,
    /// Per-query text. Placeholders: `{modification}`, `{caption}`, `{k}`,
    /// `{m}`, `{max_index}`.
    pub instruction: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, MllmError> {
        let t: Self = toml::from_str(text).map_err(|e| MllmError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MllmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| MllmError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn builtin(kind: PromptKind) -> Self {
        let src = match kind {
            PromptKind::Caption => CAPTION_TEMPLATE,
            PromptKind::Rerank => RERANK_TEMPLATE,
            PromptKind::RerankCaptionIntent => RERANK_CAPTION_TEMPLATE,
        };
        Self::parse(src).expect("bundled prompt templates are valid")
    }

    pub fn validate(&self) -> Result<(), MllmError> {
        match self.kind {
            PromptKind::Caption if self.few_shot.len() != 3 => Err(MllmError::Template(format!(
                "caption template needs exactly 3 few-shot examples, found {}",
                self.few_shot.len()
            ))),
            PromptKind::Caption if !self.instruction.contains("{modification}") => {
                Err(MllmError::Template("caption instruction lacks {modification}".into()))
            }
            PromptKind::RerankCaptionIntent if !self.instruction.contains("{caption}") => {
                Err(MllmError::Template("caption-intent instruction lacks {caption}".into()))
            }
            _ => Ok(()),
        }
    }

    fn system_message(&self) -> String {
        let mut s = self.system_text.trim().to_string();
        if !self.rules.is_empty() {
            s.push_str("\n\nRules:");
            for r in &self.rules {
                s.push_str("\n- ");
                s.push_str(r);
            }
        }
        s
    }

    fn few_shot_block(&self) -> String {
        let mut s = String::new();
        for (i, ex) in self.few_shot.iter().enumerate() {
            s.push_str(&format!(
                "Example {}:\nReference image: {}\nModification: {}\nTarget image description: {}\n\n",
                i + 1,
                ex.reference,
                ex.modification,
                ex.target
            ));
        }
        s
    }

    fn fill(&self, modification: &str, caption: &str, m: usize) -> String {
        let k = m * m;
        self.instruction
            .trim()
            .replace("{modification}", modification)
            .replace("{caption}", caption)
            .replace("{max_index}", &k.saturating_sub(1).to_string())
            .replace("{k}", &k.to_string())
            .replace("{m}", &m.to_string())
    }
}

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    /// `data:` URL carrying a base64 image.
    Image(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: &'static str,
    pub content: Vec<ContentPart>,
}

/// Context about the request that is not sent on the wire; the mock backend
/// answers from it.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestMeta {
    pub kind: PromptKind,
    pub query_id: String,
    pub modification: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub messages: Vec<ChatMessage>,
    pub meta: RequestMeta,
}

impl ChatRequest {
    /// OpenAI-compatible `/chat/completions` body.
    pub fn to_json(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let parts: Vec<Value> = m
                    .content
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text(t) => json!({"type": "text", "text": t}),
                        ContentPart::Image(url) => json!({"type": "image_url", "image_url": {"url": url}}),
                    })
                    .collect();
                // plain-text messages use the string form for wider compatibility
                match (m.content.len(), m.content.first()) {
                    (1, Some(ContentPart::Text(t))) => json!({"role": m.role, "content": t}),
                    _ => json!({"role": m.role, "content": parts}),
                }
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
        });
        if let Some(n) = self.max_tokens {
            body["max_tokens"] = json!(n);
        }
        body
    }

    /// Number of image attachments, in order of appearance.
    pub fn image_count(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| &m.content)
            .filter(|p| matches!(p, ContentPart::Image(_)))
            .count()
    }
}

pub fn image_data_url(bytes: &[u8]) -> Result<String, MllmError> {
    let fmt = image::guess_format(bytes).map_err(|_| MllmError::UndecodableImage)?;
    let mime = fmt.to_mime_type();
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

pub fn build_caption_request(
    query_id: &str,
    ref_image: &[u8],
    mod_text: &str,
    cfg: &MllmConfig,
    tmpl: &PromptTemplate,
) -> Result<ChatRequest, MllmError> {
    if tmpl.kind != PromptKind::Caption {
        return Err(MllmError::WrongTemplate(tmpl.kind));
    }
    let text = format!("{}{}", tmpl.few_shot_block(), tmpl.fill(mod_text, "", 0));
    Ok(ChatRequest {
        model: cfg.model_name.clone(),
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        messages: vec![
            ChatMessage {
                role: "system",
                content: vec![ContentPart::Text(tmpl.system_message())],
            },
            ChatMessage {
                role: "user",
                content: vec![ContentPart::Text(text), ContentPart::Image(image_data_url(ref_image)?)],
            },
        ],
        meta: RequestMeta {
            kind: PromptKind::Caption,
            query_id: query_id.into(),
            modification: mod_text.into(),
            k: 0,
        },
    })
}

/// The user's intent as shown to the reranker.
#[derive(Debug, Clone, Copy)]
pub enum RerankIntent<'a> {
    /// Reference image bytes plus modification text.
    Reference { image: &'a [u8], modification: &'a str },
    /// Generated target caption; no reference image is attached.
    Caption { caption: &'a str, modification: &'a str },
}

pub fn build_rerank_request(
    query_id: &str,
    intent: RerankIntent<'_>,
    grid_png: &[u8],
    m: usize,
    cfg: &MllmConfig,
    tmpl: &PromptTemplate,
) -> Result<ChatRequest, MllmError> {
    let mut content = Vec::with_capacity(3);
    let modification = match (tmpl.kind, intent) {
        (PromptKind::Rerank, RerankIntent::Reference { image, modification }) => {
            content.push(ContentPart::Text(tmpl.fill(modification, "", m)));
            content.push(ContentPart::Image(image_data_url(image)?));
            modification
        }
        (PromptKind::RerankCaptionIntent, RerankIntent::Caption { caption, modification }) => {
            content.push(ContentPart::Text(tmpl.fill(modification, caption, m)));
            modification
        }
        (kind, _) => return Err(MllmError::WrongTemplate(kind)),
    };
    content.push(ContentPart::Image(image_data_url(grid_png)?));
    Ok(ChatRequest {
        model: cfg.model_name.clone(),
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        messages: vec![
            ChatMessage {
                role: "system",
                content: vec![ContentPart::Text(tmpl.system_message())],
            },
            ChatMessage { role: "user", content },
        ],
        meta: RequestMeta {
            kind: tmpl.kind,
            query_id: query_id.into(),
            modification: modification.into(),
            k: m * m,
        },
    })
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// One failed attempt, as reported by a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    Timeout,
    Transport(String),
    Http { status: u16, body: String },
    /// The server signalled a refusal structurally (refusal field or
    /// content-filter finish reason).
    Refusal(String),
    Malformed(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MllmError {
    #[error("request timed out (after {retries} retries)")]
    ApiTimeout { retries: u32 },
    #[error("model refused (after {retries} retries): {text}")]
    ApiRefusal { retries: u32, text: String },
    #[error("empty completion (after {retries} retries)")]
    EmptyCompletion { retries: u32 },
    #[error("transport error (after {retries} retries): {message}")]
    TransportError { retries: u32, message: String },
    #[error("HTTP {status} (after {retries} retries): {body}")]
    HttpStatus { retries: u32, status: u16, body: String },
    #[error("prompt template error: {0}")]
    Template(String),
    #[error("template kind {0:?} does not fit this call")]
    WrongTemplate(PromptKind),
    #[error("image bytes are not a recognized image format")]
    UndecodableImage,
    #[error("invalid endpoint: {0}")]
    Endpoint(String),
}

impl MllmError {
    pub fn retries(&self) -> u32 {
        match self {
            MllmError::ApiTimeout { retries }
            | MllmError::ApiRefusal { retries, .. }
            | MllmError::EmptyCompletion { retries }
            | MllmError::TransportError { retries, .. }
            | MllmError::HttpStatus { retries, .. } => *retries,
            _ => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: &MllmConfig) -> Result<Self, MllmError> {
        let base = cfg.endpoint_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(MllmError::Endpoint(cfg.endpoint_url.clone()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| MllmError::Endpoint(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { client, url, api_key })
    }
}

/// Pulls the assistant text out of a chat-completions response body.
pub fn extract_completion(body: &Value) -> Result<String, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?;
    let message = choice.get("message").unwrap_or(&Value::Null);
    if let Some(r) = message.get("refusal").and_then(Value::as_str) {
        if !r.is_empty() {
            return Err(BackendError::Refusal(r.to_string()));
        }
    }
    if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
        return Err(BackendError::Refusal("content_filter".into()));
    }
    match message.get("content") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Array(parts)) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        Some(Value::Null) | None => Ok(String::new()),
        Some(other) => Err(BackendError::Malformed(format!("unexpected content {other}"))),
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut req = self.client.post(&self.url).json(&request.to_json());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        extract_completion(&body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockMode {
    Echo,
    Identity,
    Reverse,
    Fixed(String),
    Script {
        captions: HashMap<String, String>,
        rerank: HashMap<String, String>,
    },
}

impl MockMode {
    pub fn from_endpoint(endpoint: &str) -> Result<Self, MllmError> {
        let rest = endpoint
            .strip_prefix("mock:")
            .ok_or_else(|| MllmError::Endpoint(endpoint.into()))?;
        let (mode, arg) = rest.split_once(':').unwrap_or((rest, ""));
        match mode {
            "" | "echo" => Ok(MockMode::Echo),
            "identity" => Ok(MockMode::Identity),
            "reverse" => Ok(MockMode::Reverse),
            "fixed" => Ok(MockMode::Fixed(arg.to_string())),
            "script" => {
                #[derive(Deserialize)]
                struct Script {
                    #[serde(default)]
                    captions: HashMap<String, String>,
                    #[serde(default)]
                    rerank: HashMap<String, String>,
                }
                let text = std::fs::read_to_string(arg).map_err(|e| MllmError::Endpoint(format!("{arg}: {e}")))?;
                let s: Script = serde_json::from_str(&text).map_err(|e| MllmError::Endpoint(format!("{arg}: {e}")))?;
                Ok(MockMode::Script {
                    captions: s.captions,
                    rerank: s.rerank,
                })
            }
            other => Err(MllmError::Endpoint(format!("unknown mock mode {other:?}"))),
        }
    }
}

fn index_list(idx: impl Iterator<Item = usize>) -> String {
    let parts: Vec<String> = idx.map(|i| i.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

/// Offline backend with deterministic replies, call counting, injectable
/// failures, and an in-flight probe.
pub struct MockBackend {
    mode: MockMode,
    delay: Duration,
    failures: Mutex<Vec<BackendError>>,
    calls: AtomicUsize,
    inflight: AtomicUsize,
    max_inflight_seen: AtomicUsize,
}

impl MockBackend {
    pub fn new(mode: MockMode) -> Self {
        Self {
            mode,
            delay: Duration::ZERO,
            failures: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
            inflight: AtomicUsize::new(0),
            max_inflight_seen: AtomicUsize::new(0),
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Queues failures returned (in order) before any normal reply.
    pub fn with_failures(self, failures: Vec<BackendError>) -> Self {
        let mut f = failures;
        f.reverse();
        *self.failures.lock().unwrap() = f;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_inflight_seen(&self) -> usize {
        self.max_inflight_seen.load(Ordering::SeqCst)
    }

    fn reply(&self, meta: &RequestMeta) -> String {
        let caption = || format!("TARGET: {}", meta.modification);
        match (&self.mode, meta.kind) {
            (MockMode::Fixed(s), _) => s.clone(),
            (MockMode::Script { captions, .. }, PromptKind::Caption) => {
                captions.get(&meta.query_id).cloned().unwrap_or_else(caption)
            }
            (_, PromptKind::Caption) => caption(),
            (MockMode::Reverse, _) => index_list((0..meta.k).rev()),
            (MockMode::Script { rerank, .. }, _) => rerank
                .get(&meta.query_id)
                .cloned()
                .unwrap_or_else(|| index_list(0..meta.k)),
            _ => index_list(0..meta.k),
        }
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_inflight_seen.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let injected = self.failures.lock().unwrap().pop();
        self.inflight.fetch_sub(1, Ordering::SeqCst);
        match injected {
            Some(e) => Err(e),
            None => Ok(self.reply(&request.meta)),
        }
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// Counting semaphore bounding outstanding requests.
struct InflightGate {
    limit: usize,
    used: Mutex<usize>,
    cv: Condvar,
}

struct GatePass<'a>(&'a InflightGate);

impl InflightGate {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePass<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            used = self.cv.wait(used).unwrap();
        }
        *used += 1;
        GatePass(self)
    }
}

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

/// A completion with the number of retries it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
}

/// Shareable client: retries with exponential backoff and jitter, refusal
/// detection, and an in-flight request budget.
pub struct MllmClient {
    cfg: MllmConfig,
    backend: Arc<dyn ChatBackend>,
    gate: InflightGate,
    markers: Vec<String>,
}

impl MllmClient {
    /// Builds the backend named by `cfg.endpoint_url`.
    pub fn new(cfg: MllmConfig) -> Result<Self, MllmError> {
        let backend: Arc<dyn ChatBackend> = if cfg.is_mock() {
            Arc::new(MockBackend::new(MockMode::from_endpoint(&cfg.endpoint_url)?))
        } else {
            Arc::new(HttpBackend::new(&cfg)?)
        };
        Ok(Self::with_backend(cfg, backend))
    }

    pub fn with_backend(cfg: MllmConfig, backend: Arc<dyn ChatBackend>) -> Self {
        let markers = cfg.refusal_markers.iter().map(|m| m.to_lowercase()).collect();
        Self {
            gate: InflightGate::new(cfg.max_inflight),
            cfg,
            backend,
            markers,
        }
    }

    pub fn config(&self) -> &MllmConfig {
        &self.cfg
    }

    pub fn is_refusal(&self, text: &str) -> bool {
        let t = text.to_lowercase().replace('\u{2019}', "'");
        self.markers.iter().any(|m| t.contains(m.as_str()))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.cfg.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
        let capped = base.min(self.cfg.backoff_max_ms);
        let jitter = if capped > 1 { rand::rng().random_range(0..=capped / 2) } else { 0 };
        Duration::from_millis(capped + jitter)
    }

    /// Sends `request`, retrying transient failures up to `max_retries` times.
    pub fn complete(&self, request: &ChatRequest) -> Result<Completion, MllmError> {
        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _pass = self.gate.acquire();
                self.backend.send(request)
            };
            let err = match outcome {
                Ok(text) if text.trim().is_empty() => MllmError::EmptyCompletion { retries: attempt },
                Ok(text) if self.is_refusal(&text) => MllmError::ApiRefusal { retries: attempt, text },
                Ok(text) => return Ok(Completion { text, retries: attempt }),
                Err(e) => {
                    let retryable = e.retryable();
                    let mapped = match e {
                        BackendError::Timeout => MllmError::ApiTimeout { retries: attempt },
                        BackendError::Transport(message) | BackendError::Malformed(message) => {
                            MllmError::TransportError { retries: attempt, message }
                        }
                        BackendError::Http { status, body } => MllmError::HttpStatus {
                            retries: attempt,
                            status,
                            body,
                        },
                        BackendError::Refusal(text) => MllmError::ApiRefusal { retries: attempt, text },
                    };
                    if !retryable {
                        return Err(mapped);
                    }
                    mapped
                }
            };
            if attempt >= self.cfg.max_retries {
                return Err(err);
            }
            log::debug!("{} attempt {} failed: {err}", request.meta.query_id, attempt + 1);
            std::thread::sleep(self.backoff(attempt));
            attempt += 1;
        }
    }

    /// Asks for a description of the target image. The result is trimmed,
    /// unquoted and collapsed to one paragraph.
    pub fn generate_target_caption(
        &self,
        query_id: &str,
        ref_image: &[u8],
        mod_text: &str,
        tmpl: &PromptTemplate,
    ) -> Result<Completion, MllmError> {
        let req = build_caption_request(query_id, ref_image, mod_text, &self.cfg, tmpl)?;
        let c = self.complete(&req)?;
        let text = clean_caption(&c.text);
        if text.is_empty() {
            return Err(MllmError::EmptyCompletion { retries: c.retries });
        }
        Ok(Completion { text, retries: c.retries })
    }

    /// Sends the grid for reranking and returns the raw completion.
    pub fn rerank_call(
        &self,
        query_id: &str,
        intent: RerankIntent<'_>,
        grid_png: &[u8],
        m: usize,
        tmpl: &PromptTemplate,
    ) -> Result<Completion, MllmError> {
        let req = build_rerank_request(query_id, intent, grid_png, m, &self.cfg, tmpl)?;
        self.complete(&req)
    }
}

/// Strips surrounding whitespace and quote marks and joins lines.
pub fn clean_caption(raw: &str) -> String {
    let quotes: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}'];
    let joined = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    joined.trim().trim_matches(quotes).trim().to_string()
}
