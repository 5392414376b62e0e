//! Model clients: chat-style text generation and text embedding.
//!
//! Both are traits so the pipeline can run against hosted models, local
//! servers speaking the OpenAI-compatible HTTP API, or scripted fixtures.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("could not decode response: {0}")]
    Decode(String),
    #[error("environment variable {0} is not set")]
    MissingCredential(String),
    #[error("scripted client: {0}")]
    Script(String),
    /// A service failure recorded in the response cache by an earlier run.
    #[error("{0} (cached)")]
    Cached(String),
}

impl ClientError {
    /// Failures of the remote service, as opposed to local misconfiguration.
    pub fn is_service_failure(&self) -> bool {
        matches!(
            self,
            ClientError::Transport(_) | ClientError::Http { .. } | ClientError::Decode(_)
        )
    }

    fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user(user: impl Into<String>, temperature: f64) -> Self {
        Self {
            system: None,
            user: user.into(),
            temperature,
        }
    }
}

pub trait TextGenClient: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

pub trait EmbedClient: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError>;
}

/// Caps the number of requests in flight at once.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut current = self.current.lock().expect("limiter poisoned");
        while *current >= self.max {
            current = self.freed.wait(current).expect("limiter poisoned");
        }
        *current += 1;
        InFlightGuard { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().expect("limiter poisoned")
    }
}

pub struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut current = self.limiter.current.lock().expect("limiter poisoned");
        *current -= 1;
        self.limiter.freed.notify_one();
    }
}

// ---------------------------------------------------------------------------
// Client specs (run configuration)

fn default_in_flight() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

/// Settings shared by the HTTP clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    /// Full URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextGenSpec {
    /// Replays replies from a JSON script file.
    Scripted { model_id: String, script: String },
    /// OpenAI-compatible `/chat/completions` endpoint.
    OpenaiChat {
        model_id: String,
        #[serde(flatten)]
        http: HttpSettings,
    },
}

impl TextGenSpec {
    pub fn model_id(&self) -> &str {
        match self {
            TextGenSpec::Scripted { model_id, .. } | TextGenSpec::OpenaiChat { model_id, .. } => {
                model_id
            }
        }
    }

    /// Instantiates the client; relative script paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<Arc<dyn TextGenClient>, ClientError> {
        Ok(match self {
            TextGenSpec::Scripted { model_id, script } => {
                Arc::new(ScriptedTextGen::from_file(model_id, &base.join(script))?)
            }
            TextGenSpec::OpenaiChat { model_id, http } => {
                Arc::new(OpenAiChat::new(model_id, http.clone())?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedSpec {
    /// Deterministic local bag-of-words feature hashing.
    Hashing {
        model_id: String,
        #[serde(default = "default_hash_dim")]
        dim: usize,
    },
    /// Vectors recorded in a JSON object mapping text to vector.
    Fixture { model_id: String, path: String },
    /// OpenAI-compatible `/embeddings` endpoint.
    OpenaiEmbeddings {
        model_id: String,
        /// Prepended to every input, e.g. `"query: "` for E5 models.
        #[serde(default)]
        prefix: Option<String>,
        #[serde(flatten)]
        http: HttpSettings,
    },
}

fn default_hash_dim() -> usize {
    256
}

impl EmbedSpec {
    pub fn model_id(&self) -> &str {
        match self {
            EmbedSpec::Hashing { model_id, .. }
            | EmbedSpec::Fixture { model_id, .. }
            | EmbedSpec::OpenaiEmbeddings { model_id, .. } => model_id,
        }
    }

    pub fn build(&self, base: &Path) -> Result<Arc<dyn EmbedClient>, ClientError> {
        Ok(match self {
            EmbedSpec::Hashing { model_id, dim } => Arc::new(HashingEmbed::new(model_id, *dim)),
            EmbedSpec::Fixture { model_id, path } => {
                Arc::new(FixtureEmbed::from_file(model_id, &base.join(path))?)
            }
            EmbedSpec::OpenaiEmbeddings {
                model_id,
                prefix,
                http,
            } => Arc::new(OpenAiEmbed::new(model_id, prefix.clone(), http.clone())?),
        })
    }
}

// ---------------------------------------------------------------------------
// Scripted / fixture clients

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Error { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    /// The rule fires when the user message contains this substring.
    pub contains: String,
    /// Successive replies for successive matching calls; the last one repeats.
    pub replies: Vec<ScriptedReply>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: Option<String>,
}

/// Replays canned replies. The first rule whose `contains` substring occurs in
/// the user message answers; each rule steps through its replies per call.
#[derive(Debug)]
pub struct ScriptedTextGen {
    model_id: String,
    script: Script,
    calls: Vec<AtomicUsize>,
}

impl ScriptedTextGen {
    pub fn new(model_id: impl Into<String>, script: Script) -> Self {
        let calls = script.rules.iter().map(|_| AtomicUsize::new(0)).collect();
        Self {
            model_id: model_id.into(),
            script,
            calls,
        }
    }

    pub fn from_file(model_id: &str, path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Script(format!("{}: {e}", path.display())))?;
        let script = serde_json::from_str(&text)
            .map_err(|e| ClientError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::new(model_id, script))
    }

    /// A client that always answers with `reply`.
    pub fn constant(model_id: impl Into<String>, reply: impl Into<String>) -> Self {
        Self::new(
            model_id,
            Script {
                rules: Vec::new(),
                default: Some(reply.into()),
            },
        )
    }
}

impl TextGenClient for ScriptedTextGen {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        for (rule, calls) in self.script.rules.iter().zip(&self.calls) {
            if request.user.contains(&rule.contains) {
                let n = calls.fetch_add(1, Ordering::SeqCst);
                let reply = rule
                    .replies
                    .get(n.min(rule.replies.len().saturating_sub(1)))
                    .ok_or_else(|| {
                        ClientError::Script(format!("rule {:?} has no replies", rule.contains))
                    })?;
                return match reply {
                    ScriptedReply::Text(t) => Ok(t.clone()),
                    ScriptedReply::Error { error } => Err(ClientError::Transport(error.clone())),
                };
            }
        }
        self.script
            .default
            .clone()
            .ok_or_else(|| ClientError::Script("no rule matches the request".into()))
    }
}

/// Looks up pre-recorded vectors by exact text.
#[derive(Debug, Clone)]
pub struct FixtureEmbed {
    model_id: String,
    vectors: HashMap<String, Vec<f64>>,
}

impl FixtureEmbed {
    pub fn new(model_id: impl Into<String>, vectors: HashMap<String, Vec<f64>>) -> Self {
        Self {
            model_id: model_id.into(),
            vectors,
        }
    }

    pub fn from_file(model_id: &str, path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Script(format!("{}: {e}", path.display())))?;
        let vectors = serde_json::from_str(&text)
            .map_err(|e| ClientError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::new(model_id, vectors))
    }
}

impl EmbedClient for FixtureEmbed {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(t)
                    .cloned()
                    .ok_or_else(|| ClientError::Script(format!("no recorded vector for {t:?}")))
            })
            .collect()
    }
}

/// Signed feature hashing over lowercased word unigrams and character
/// trigrams. Deterministic across platforms; useful offline and in tests.
#[derive(Debug, Clone)]
pub struct HashingEmbed {
    model_id: String,
    dim: usize,
}

impl HashingEmbed {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Self {
        Self {
            model_id: model_id.into(),
            dim: dim.max(1),
        }
    }

    fn fnv1a(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = Self::fnv1a(feature.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % self.dim as u64) as usize] += sign * weight;
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for word in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            self.add(&mut v, &format!("w:{word}"), 1.0);
            let chars: Vec<char> = format!("#{word}#").chars().collect();
            for tri in chars.windows(3) {
                self.add(
                    &mut v,
                    &format!("c:{}", tri.iter().collect::<String>()),
                    0.5,
                );
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

impl EmbedClient for HashingEmbed {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Wraps a client and counts calls.
pub struct CountingTextGen {
    inner: Arc<dyn TextGenClient>,
    calls: AtomicUsize,
}

impl CountingTextGen {
    pub fn new(inner: Arc<dyn TextGenClient>) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextGenClient for CountingTextGen {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

pub struct CountingEmbed {
    inner: Arc<dyn EmbedClient>,
    calls: AtomicUsize,
}

impl CountingEmbed {
    pub fn new(inner: Arc<dyn EmbedClient>) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl EmbedClient for CountingEmbed {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(texts)
    }
}

// ---------------------------------------------------------------------------
// HTTP clients

struct HttpCore {
    http: reqwest::blocking::Client,
    settings: HttpSettings,
    api_key: Option<String>,
    limiter: InFlightLimiter,
}

impl HttpCore {
    fn new(settings: HttpSettings) -> Result<Self, ClientError> {
        let api_key = match &settings.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| ClientError::MissingCredential(var.clone()))?)
            }
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let limiter = InFlightLimiter::new(settings.max_in_flight);
        Ok(Self {
            http,
            settings,
            api_key,
            limiter,
        })
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<serde_json::Value, ClientError> {
        let _slot = self.limiter.acquire();
        let mut req = self.http.post(&self.settings.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn post(&self, body: &serde_json::Value) -> Result<serde_json::Value, ClientError> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Err(e) if e.is_retryable() && attempt < self.settings.max_retries => {
                    let backoff = Duration::from_millis(500 * 2u64.pow(attempt));
                    log::warn!(
                        "request to {} failed ({e}); retrying in {backoff:?}",
                        self.settings.endpoint
                    );
                    thread::sleep(backoff);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

pub struct OpenAiChat {
    model_id: String,
    core: HttpCore,
}

impl OpenAiChat {
    pub fn new(model_id: &str, settings: HttpSettings) -> Result<Self, ClientError> {
        Ok(Self {
            model_id: model_id.to_string(),
            core: HttpCore::new(settings)?,
        })
    }
}

impl TextGenClient for OpenAiChat {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        let body = json!({
            "model": self.model_id,
            "messages": messages,
            "temperature": request.temperature,
        });
        let resp = self.core.post(&body)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Decode("missing choices[0].message.content".into()))
    }
}

pub struct OpenAiEmbed {
    model_id: String,
    prefix: Option<String>,
    core: HttpCore,
}

impl OpenAiEmbed {
    pub fn new(
        model_id: &str,
        prefix: Option<String>,
        settings: HttpSettings,
    ) -> Result<Self, ClientError> {
        Ok(Self {
            model_id: model_id.to_string(),
            prefix,
            core: HttpCore::new(settings)?,
        })
    }
}

impl EmbedClient for OpenAiEmbed {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        let input: Vec<String> = texts
            .iter()
            .map(|t| format!("{}{t}", self.prefix.as_deref().unwrap_or("")))
            .collect();
        let resp = self
            .core
            .post(&json!({"model": self.model_id, "input": input}))?;
        let data = resp["data"]
            .as_array()
            .ok_or_else(|| ClientError::Decode("missing data array".into()))?;
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().map_or(pos, |i| i as usize);
            let vector = item["embedding"]
                .as_array()
                .ok_or_else(|| ClientError::Decode("missing embedding".into()))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| ClientError::Decode("non-numeric embedding".into()))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            *out.get_mut(index)
                .ok_or_else(|| ClientError::Decode(format!("index {index} out of range")))? =
                vector;
        }
        if out.iter().any(Vec::is_empty) {
            return Err(ClientError::Decode(
                "response is missing some embeddings".into(),
            ));
        }
        Ok(out)
    }
}
