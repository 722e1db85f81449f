//! Chat-completion and embedding access behind one gateway.
//!
//! The gateway owns the retry policy and output normalization; the backend
//! behind it is either a live OpenAI-compatible HTTP API, a replay store of
//! recorded responses, a recorder wrapping another backend, or a scripted
//! backend for offline tests.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::retrieval::tokenize;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("no replay entry for digest {0}")]
    MissingReplayEntry(String),
    #[error("no scripted rule matches request: {0}")]
    NoMatch(String),
    #[error("scripted rules {0:?} all match the same request")]
    AmbiguousMatch(Vec<usize>),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("environment variable `{0}` with the API key is not set")]
    MissingApiKey(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl GatewayError {
    /// Errors worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::BackendUnavailable(_) | GatewayError::Timeout)
    }

    /// True when the failure means the model service could not be reached.
    pub fn is_unavailability(&self) -> bool {
        matches!(
            self,
            GatewayError::BackendUnavailable(_) | GatewayError::Timeout | GatewayError::MissingApiKey(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub force_json: bool,
    /// Sample index for repeated draws of the same prompt. Part of the
    /// request digest; not sent over the wire.
    #[serde(default)]
    pub variant: u32,
}

impl ChatRequest {
    pub fn new(
        system: impl Into<String>,
        user: impl Into<String>,
        temperature: f64,
        force_json: bool,
    ) -> Result<Self, GatewayError> {
        let req = Self {
            system: system.into(),
            user: user.into(),
            temperature,
            force_json,
            variant: 0,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn with_variant(mut self, variant: u32) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.system.trim().is_empty() || self.user.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("system and user text must be nonempty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Text the scripted backend matches against.
    pub fn match_text(&self) -> String {
        format!("{}\n{}", self.system, self.user)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub api_key_env_name: String,
    pub chat_model_name: String,
    pub embed_model_name: String,
    pub max_retries: u32,
    pub timeout_ms: u64,
    pub backoff_base_ms: u64,
    pub embed_batch_size: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1".into(),
            api_key_env_name: "OPENAI_API_KEY".into(),
            chat_model_name: "gpt-4o".into(),
            embed_model_name: "text-embedding-ada-002".into(),
            max_retries: 3,
            timeout_ms: 60_000,
            backoff_base_ms: 250,
            embed_batch_size: 256,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::InvalidRequest("timeout_ms must be positive".into()));
        }
        if self.embed_batch_size == 0 {
            return Err(GatewayError::InvalidRequest("embed_batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that can answer chat and embedding requests.
pub trait LlmBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest, cfg: &BackendConfig) -> Result<String, GatewayError>;
    fn embed(&self, texts: &[String], cfg: &BackendConfig) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// Retry, batching and normalization in front of a backend. Cheap to clone.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    cfg: BackendConfig,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>, cfg: BackendConfig) -> Self {
        Self { backend, cfg }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn chat_complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        self.with_retries(|| self.backend.chat(req, &self.cfg))
    }

    /// One L2-normalized vector per input text.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.embed_batch_size.max(1)) {
            let vectors = self.with_retries(|| self.backend.embed(chunk, &self.cfg))?;
            if vectors.len() != chunk.len() {
                return Err(GatewayError::InvalidResponse(format!(
                    "{} vectors for {} inputs",
                    vectors.len(),
                    chunk.len()
                )));
            }
            out.extend(vectors);
        }
        let dim = out[0].len();
        if dim == 0 {
            return Err(GatewayError::InvalidResponse("zero-dimensional embedding".into()));
        }
        for v in out.iter_mut() {
            if v.len() != dim {
                return Err(GatewayError::DimensionMismatch { expected: dim, got: v.len() });
            }
            l2_normalize(v)?;
        }
        Ok(out)
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let mut attempt = 0u32;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < self.cfg.max_retries => {
                    let delay = backoff_delay(self.cfg.backoff_base_ms, attempt);
                    log::warn!("transient backend error ({e}); retry {} in {:?}", attempt + 1, delay);
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// base · 2^attempt with ±20% jitter.
pub fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    let nominal = base_ms as f64 * 2f64.powi(attempt.min(16) as i32);
    let jitter = rand::thread_rng().gen_range(0.8..=1.2);
    Duration::from_micros((nominal * jitter * 1000.0) as u64)
}

pub fn l2_normalize(v: &mut [f64]) -> Result<(), GatewayError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(GatewayError::InvalidResponse("embedding has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

// ---------------------------------------------------------------------------
// Request digests and the replay store

fn canonical_text(text: &str) -> String {
    text.replace("\r\n", "\n")
        .lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

/// Compact JSON with object keys sorted at every level.
fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            let body = sorted
                .iter()
                .map(|(k, v)| format!("{}:{}", Value::String((*k).clone()), canonical_json(v)))
                .collect::<Vec<_>>()
                .join(",");
            format!("{{{body}}}")
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn chat_digest(req: &ChatRequest, model: &str) -> String {
    let value = json!({
        "kind": "chat",
        "model": model,
        "system": canonical_text(&req.system),
        "user": canonical_text(&req.user),
        "temperature": req.temperature,
        "force_json": req.force_json,
        "variant": req.variant,
    });
    sha256_hex(canonical_json(&value).as_bytes())
}

pub fn embed_digest(text: &str, model: &str) -> String {
    let value = json!({ "kind": "embed", "model": model, "input": canonical_text(text) });
    sha256_hex(canonical_json(&value).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayKind {
    Chat,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub digest: String,
    pub kind: ReplayKind,
    pub response: Value,
}

/// Recorded responses keyed by request digest. Persisted as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayStore {
    entries: BTreeMap<String, ReplayRecord>,
}

impl ReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        let mut store = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ReplayRecord = serde_json::from_str(line)
                .map_err(|e| GatewayError::Io(format!("{} line {}: {e}", path.display(), i + 1)))?;
            store.entries.insert(record.digest.clone(), record);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let mut out = String::new();
        for record in self.entries.values() {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))
    }

    pub fn insert(&mut self, record: ReplayRecord) {
        self.entries.insert(record.digest.clone(), record);
    }

    pub fn get(&self, digest: &str) -> Option<&ReplayRecord> {
        self.entries.get(digest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn chat_text(&self, digest: &str) -> Result<String, GatewayError> {
        match self.entries.get(digest) {
            Some(ReplayRecord { kind: ReplayKind::Chat, response: Value::String(s), .. }) => Ok(s.clone()),
            Some(_) => Err(GatewayError::InvalidResponse(format!("replay entry {digest} is not a chat response"))),
            None => Err(GatewayError::MissingReplayEntry(digest.to_string())),
        }
    }

    fn embedding(&self, digest: &str) -> Result<Vec<f64>, GatewayError> {
        match self.entries.get(digest) {
            Some(ReplayRecord { kind: ReplayKind::Embed, response, .. }) => serde_json::from_value(response.clone())
                .map_err(|e| GatewayError::InvalidResponse(format!("replay entry {digest}: {e}"))),
            Some(_) => Err(GatewayError::InvalidResponse(format!("replay entry {digest} is not an embedding"))),
            None => Err(GatewayError::MissingReplayEntry(digest.to_string())),
        }
    }
}

/// Serves recorded responses only; never touches the network.
pub struct ReplayBackend {
    store: Arc<ReplayStore>,
}

impl ReplayBackend {
    pub fn new(store: ReplayStore) -> Self {
        Self { store: Arc::new(store) }
    }
}

impl LlmBackend for ReplayBackend {
    fn chat(&self, req: &ChatRequest, cfg: &BackendConfig) -> Result<String, GatewayError> {
        self.store.chat_text(&chat_digest(req, &cfg.chat_model_name))
    }

    fn embed(&self, texts: &[String], cfg: &BackendConfig) -> Result<Vec<Vec<f64>>, GatewayError> {
        texts
            .iter()
            .map(|t| self.store.embedding(&embed_digest(t, &cfg.embed_model_name)))
            .collect()
    }
}

/// Answers from the store when possible, otherwise asks `inner` and records
/// the answer. Writes are serialized and appended to `path` when given.
pub struct RecordingBackend {
    inner: Arc<dyn LlmBackend>,
    store: Mutex<ReplayStore>,
    path: Option<PathBuf>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn LlmBackend>, store: ReplayStore, path: Option<PathBuf>) -> Self {
        Self { inner, store: Mutex::new(store), path }
    }

    pub fn snapshot(&self) -> ReplayStore {
        self.store.lock().expect("replay store lock").clone()
    }

    fn record(&self, record: ReplayRecord) -> Result<(), GatewayError> {
        let mut store = self.store.lock().expect("replay store lock");
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}").map_err(|e| GatewayError::Io(e.to_string()))?;
        }
        store.insert(record);
        Ok(())
    }
}

impl LlmBackend for RecordingBackend {
    fn chat(&self, req: &ChatRequest, cfg: &BackendConfig) -> Result<String, GatewayError> {
        let digest = chat_digest(req, &cfg.chat_model_name);
        if let Ok(text) = self.store.lock().expect("replay store lock").chat_text(&digest) {
            return Ok(text);
        }
        let text = self.inner.chat(req, cfg)?;
        self.record(ReplayRecord { digest, kind: ReplayKind::Chat, response: Value::String(text.clone()) })?;
        Ok(text)
    }

    fn embed(&self, texts: &[String], cfg: &BackendConfig) -> Result<Vec<Vec<f64>>, GatewayError> {
        let digests: Vec<String> = texts.iter().map(|t| embed_digest(t, &cfg.embed_model_name)).collect();
        let mut found: Vec<Option<Vec<f64>>> = {
            let store = self.store.lock().expect("replay store lock");
            digests.iter().map(|d| store.embedding(d).ok()).collect()
        };
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| found[i].is_none()).collect();
        if !missing.is_empty() {
            let request: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.inner.embed(&request, cfg)?;
            if vectors.len() != request.len() {
                return Err(GatewayError::InvalidResponse("embedding count mismatch".into()));
            }
            for (&i, v) in missing.iter().zip(vectors) {
                self.record(ReplayRecord { digest: digests[i].clone(), kind: ReplayKind::Embed, response: json!(v) })?;
                found[i] = Some(v);
            }
        }
        Ok(found.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Unavailable,
    Timeout,
    Rejected,
}

impl ScriptedFailure {
    fn to_error(self, what: &str) -> GatewayError {
        match self {
            ScriptedFailure::Unavailable => GatewayError::BackendUnavailable(format!("scripted failure ({what})")),
            ScriptedFailure::Timeout => GatewayError::Timeout,
            ScriptedFailure::Rejected => GatewayError::Rejected(format!("scripted failure ({what})")),
        }
    }
}

/// One canned behavior. A request matches when it contains every `contains`
/// substring, none of the `excludes` substrings and, if set, has the given
/// `variant`. Replies are served in order; the last one repeats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptRule {
    pub name: String,
    pub contains: Vec<String>,
    pub excludes: Vec<String>,
    pub variant: Option<u32>,
    pub replies: Vec<String>,
    pub fail_first: usize,
    pub fail: Option<ScriptedFailure>,
    pub delay_ms: u64,
}

impl ScriptRule {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Self::default() }
    }

    pub fn contains(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn excludes(mut self, needle: impl Into<String>) -> Self {
        self.excludes.push(needle.into());
        self
    }

    pub fn variant(mut self, variant: u32) -> Self {
        self.variant = Some(variant);
        self
    }

    pub fn reply(mut self, text: impl Into<String>) -> Self {
        self.replies.push(text.into());
        self
    }

    pub fn fail_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }

    pub fn always_fail(mut self, failure: ScriptedFailure) -> Self {
        self.fail = Some(failure);
        self
    }

    pub fn delay_ms(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }

    fn matches(&self, req: &ChatRequest, text: &str) -> bool {
        self.variant.is_none_or(|v| v == req.variant)
            && self.contains.iter().all(|n| text.contains(n.as_str()))
            && !self.excludes.iter().any(|n| text.contains(n.as_str()))
    }
}

/// How the scripted backend answers embedding requests.
#[derive(Debug, Clone)]
pub enum ScriptedEmbeddings {
    Hashing(HashingEmbedder),
    Table(HashMap<String, Vec<f64>>),
    Fail(ScriptedFailure),
}

/// Script file layout used by the CLI's `--backend scripted`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptFile {
    pub rules: Vec<ScriptRule>,
    pub embedding_dim: Option<usize>,
    pub embeddings: HashMap<String, Vec<f64>>,
}

/// Deterministic canned backend that counts every invocation.
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    rule_calls: Vec<AtomicUsize>,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
    embeddings: ScriptedEmbeddings,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let rule_calls = rules.iter().map(|_| AtomicUsize::new(0)).collect();
        Self {
            rules,
            rule_calls,
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
            embeddings: ScriptedEmbeddings::Hashing(HashingEmbedder::new(64)),
        }
    }

    pub fn from_script(script: ScriptFile) -> Self {
        let embeddings = if script.embeddings.is_empty() {
            ScriptedEmbeddings::Hashing(HashingEmbedder::new(script.embedding_dim.unwrap_or(64)))
        } else {
            ScriptedEmbeddings::Table(script.embeddings)
        };
        Self::new(script.rules).with_embeddings(embeddings)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        let script: ScriptFile =
            serde_json::from_str(&text).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::from_script(script))
    }

    pub fn with_embeddings(mut self, embeddings: ScriptedEmbeddings) -> Self {
        self.embeddings = embeddings;
        self
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    /// Chat plus embedding invocations.
    pub fn total_calls(&self) -> usize {
        self.chat_calls() + self.embed_calls()
    }

    pub fn calls_for(&self, rule_name: &str) -> usize {
        self.rules
            .iter()
            .zip(&self.rule_calls)
            .filter(|(r, _)| r.name == rule_name)
            .map(|(_, c)| c.load(Ordering::SeqCst))
            .sum()
    }
}

impl LlmBackend for ScriptedBackend {
    fn chat(&self, req: &ChatRequest, _cfg: &BackendConfig) -> Result<String, GatewayError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let text = req.match_text();
        let matching: Vec<usize> = (0..self.rules.len()).filter(|&i| self.rules[i].matches(req, &text)).collect();
        let idx = match matching.as_slice() {
            [] => {
                let preview: String = req.user.chars().rev().take(120).collect::<Vec<_>>().into_iter().rev().collect();
                return Err(GatewayError::NoMatch(preview));
            }
            [one] => *one,
            many => return Err(GatewayError::AmbiguousMatch(many.to_vec())),
        };
        let rule = &self.rules[idx];
        let n = self.rule_calls[idx].fetch_add(1, Ordering::SeqCst);
        if rule.delay_ms > 0 {
            thread::sleep(Duration::from_millis(rule.delay_ms));
        }
        if let Some(failure) = rule.fail {
            return Err(failure.to_error(&rule.name));
        }
        if n < rule.fail_first {
            return Err(ScriptedFailure::Unavailable.to_error(&rule.name));
        }
        let reply_idx = (n - rule.fail_first).min(rule.replies.len().saturating_sub(1));
        rule.replies
            .get(reply_idx)
            .cloned()
            .ok_or_else(|| GatewayError::InvalidResponse(format!("rule `{}` has no replies", rule.name)))
    }

    fn embed(&self, texts: &[String], _cfg: &BackendConfig) -> Result<Vec<Vec<f64>>, GatewayError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        match &self.embeddings {
            ScriptedEmbeddings::Hashing(h) => Ok(texts.iter().map(|t| h.embed(t)).collect()),
            ScriptedEmbeddings::Table(table) => texts
                .iter()
                .map(|t| table.get(t).cloned().ok_or_else(|| GatewayError::NoMatch(format!("embedding for `{t}`"))))
                .collect(),
            ScriptedEmbeddings::Fail(f) => Err(f.to_error("embeddings")),
        }
    }
}

/// Offline lexical embedding: signed feature hashing of word tokens and
/// character trigrams. Deterministic across platforms.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(2) }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        // bias keeps empty or symbol-only texts away from the zero vector
        v[0] = 0.05;
        for token in tokenize(text) {
            self.add(&mut v, token.as_bytes(), 1.0);
            let padded: Vec<char> = format!("#{token}#").chars().collect();
            for tri in padded.windows(3) {
                let s: String = tri.iter().collect();
                self.add(&mut v, s.as_bytes(), 0.5);
            }
        }
        v
    }

    fn add(&self, v: &mut [f64], bytes: &[u8], weight: f64) {
        let h = fnv1a(bytes);
        let slot = 1 + (h % (self.dim as u64 - 1)) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        v[slot] += sign * weight;
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Live OpenAI-compatible backend

pub struct OpenAiCompatibleBackend {
    client: reqwest::blocking::Client,
    api_key: String,
}

impl OpenAiCompatibleBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let api_key =
            std::env::var(&cfg.api_key_env_name).map_err(|_| GatewayError::MissingApiKey(cfg.api_key_env_name.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        Ok(Self { client, api_key })
    }

    fn post(&self, url: String, body: &Value) -> Result<Value, GatewayError> {
        let resp = self.client.post(url).bearer_auth(&self.api_key).json(body).send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::BackendUnavailable(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
            return Err(GatewayError::BackendUnavailable(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(GatewayError::Rejected(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::InvalidResponse(e.to_string()))
    }
}

fn endpoint(cfg: &BackendConfig, path: &str) -> String {
    format!("{}/{path}", cfg.endpoint_url.trim_end_matches('/'))
}

impl LlmBackend for OpenAiCompatibleBackend {
    fn chat(&self, req: &ChatRequest, cfg: &BackendConfig) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": cfg.chat_model_name,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.temperature,
        });
        if req.force_json {
            body["response_format"] = json!({"type": "json_object"});
        }
        let resp = self.post(endpoint(cfg, "chat/completions"), &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::InvalidResponse("missing choices[0].message.content".into()))
    }

    fn embed(&self, texts: &[String], cfg: &BackendConfig) -> Result<Vec<Vec<f64>>, GatewayError> {
        let body = json!({ "model": cfg.embed_model_name, "input": texts });
        let resp = self.post(endpoint(cfg, "embeddings"), &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::InvalidResponse("missing data array".into()))?;
        let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vector: Vec<f64> = serde_json::from_value(item.get("embedding").cloned().unwrap_or(Value::Null))
                .map_err(|e| GatewayError::InvalidResponse(format!("embedding {pos}: {e}")))?;
            indexed.push((index, vector));
        }
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed.into_iter().map(|(_, v)| v).collect())
    }
}
