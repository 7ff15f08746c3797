//! Prompt templates and LLM backends for building class descriptions.
//!
//! Three backends are provided: a fixture table (optionally falling back to
//! seeded synthetic text), an OpenAI-compatible chat-completions client, and
//! a disk cache that wraps either of them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;

pub const API_KEY_ENV: &str = "SGC_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    Initial,
    Summarize,
    SummaryCompare,
    DirectCompare,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [
        PromptKind::Initial,
        PromptKind::Summarize,
        PromptKind::SummaryCompare,
        PromptKind::DirectCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Initial => "Initial",
            PromptKind::Summarize => "Summarize",
            PromptKind::SummaryCompare => "SummaryCompare",
            PromptKind::DirectCompare => "DirectCompare",
        }
    }

    pub fn slots(self) -> &'static [&'static str] {
        match self {
            PromptKind::Initial => &["hoi_category"],
            PromptKind::Summarize => &["category_list"],
            PromptKind::SummaryCompare => &["hoi_category", "subset_description"],
            PromptKind::DirectCompare => &["target_category", "other_categories"],
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fills the template for `kind`. Every slot listed by [`PromptKind::slots`]
/// must be bound; extra bindings are ignored.
pub fn render_prompt(kind: PromptKind, bindings: &BTreeMap<&str, &str>) -> Result<String> {
    let get = |slot: &'static str| {
        bindings.get(slot).copied().ok_or(Error::MissingSlot {
            kind: kind.name(),
            slot,
        })
    };
    Ok(match kind {
        PromptKind::Initial => format!(
            "What features are useful to distinguish {} in a photo?",
            get("hoi_category")?
        ),
        PromptKind::Summarize => format!(
            "Summarize the following interactions with one sentence: {}?",
            get("category_list")?
        ),
        PromptKind::SummaryCompare => format!(
            "What features are useful to distinguish {} from {}?",
            get("hoi_category")?,
            get("subset_description")?
        ),
        PromptKind::DirectCompare => format!(
            "What features are useful to distinguish {} from {} in a photo?",
            get("target_category")?,
            get("other_categories")?
        ),
    })
}

pub fn initial_prompt(category: &str) -> String {
    render_prompt(
        PromptKind::Initial,
        &BTreeMap::from([("hoi_category", category)]),
    )
    .expect("all slots bound")
}

pub fn summarize_prompt(categories: &[&str]) -> String {
    let list = categories.join(", ");
    render_prompt(
        PromptKind::Summarize,
        &BTreeMap::from([("category_list", list.as_str())]),
    )
    .expect("all slots bound")
}

pub fn summary_compare_prompt(category: &str, subset_description: &str) -> String {
    render_prompt(
        PromptKind::SummaryCompare,
        &BTreeMap::from([
            ("hoi_category", category),
            ("subset_description", subset_description),
        ]),
    )
    .expect("all slots bound")
}

pub fn direct_compare_prompt(target: &str, others: &[&str]) -> String {
    let others = others.join(", ");
    render_prompt(
        PromptKind::DirectCompare,
        &BTreeMap::from([
            ("target_category", target),
            ("other_categories", others.as_str()),
        ]),
    )
    .expect("all slots bound")
}

/// Splits a possibly multi-line answer into individual feature statements,
/// dropping bullet markers. Falls back to the whole trimmed text.
pub fn split_features(text: &str) -> Vec<String> {
    let features: Vec<String> = text
        .lines()
        .map(strip_bullet)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();
    if features.is_empty() && !text.trim().is_empty() {
        vec![text.trim().to_owned()]
    } else {
        features
    }
}

fn strip_bullet(line: &str) -> &str {
    let line = line.trim();
    for marker in ["- ", "* ", "• ", "-", "*", "•"] {
        if let Some(rest) = line.strip_prefix(marker) {
            return rest.trim();
        }
    }
    // "1." / "2)" numbering
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest.trim();
        }
    }
    line
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub provider_id: String,
    pub cached: bool,
}

pub trait LlmProvider: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, prompt: &str) -> Result<LlmResponse>;

    /// Upper bound on concurrent `complete` calls the caller may issue.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Number of requests that reached the backend (cache misses included,
    /// cache hits excluded).
    fn backend_calls(&self) -> usize;
}

impl<P: LlmProvider + ?Sized> LlmProvider for Box<P> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, prompt: &str) -> Result<LlmResponse> {
        (**self).complete(prompt)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }

    fn backend_calls(&self) -> usize {
        (**self).backend_calls()
    }
}

/// Table-driven backend. In generative mode, prompts missing from the table
/// get a seeded synthetic answer instead of [`Error::FixtureMiss`].
#[derive(Debug)]
pub struct FixtureProvider {
    table: HashMap<String, String>,
    generative_seed: Option<u64>,
    log: Mutex<Vec<String>>,
}

impl FixtureProvider {
    pub fn new(table: HashMap<String, String>) -> Self {
        FixtureProvider {
            table,
            generative_seed: None,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Pure generative stub: every prompt gets synthetic text.
    pub fn generative(seed: u64) -> Self {
        FixtureProvider::new(HashMap::new()).with_generative_fallback(seed)
    }

    pub fn with_generative_fallback(mut self, seed: u64) -> Self {
        self.generative_seed = Some(seed);
        self
    }

    /// Loads a JSON object mapping prompt to response.
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(FixtureProvider::new(io::read_json(path)?))
    }

    /// Prompts received so far, in call order.
    pub fn call_log(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }
}

impl LlmProvider for FixtureProvider {
    fn id(&self) -> &str {
        if self.generative_seed.is_some() {
            "fixture+stub"
        } else {
            "fixture"
        }
    }

    fn complete(&self, prompt: &str) -> Result<LlmResponse> {
        self.log.lock().unwrap().push(prompt.to_owned());
        let text = match (self.table.get(prompt), self.generative_seed) {
            (Some(t), _) => t.clone(),
            (None, Some(seed)) => synthetic_answer(prompt, seed),
            (None, None) => return Err(Error::FixtureMiss(prompt.to_owned())),
        };
        Ok(LlmResponse {
            text,
            provider_id: self.id().to_owned(),
            cached: false,
        })
    }

    fn max_in_flight(&self) -> usize {
        4
    }

    fn backend_calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

const ADJECTIVES: &[&str] = &[
    "extended", "bent", "gripping", "raised", "relaxed", "leaning", "tilted", "close",
    "distant", "open", "clenched", "steady", "moving", "crouched", "upright", "twisted",
];
const PARTS: &[&str] = &[
    "arm", "hand", "elbow", "torso", "gaze", "head", "leg", "knee", "shoulder", "fingers",
];
const CONTEXTS: &[&str] = &[
    "the object", "the ground", "a table", "the surface", "the animal", "a handle",
    "the background", "the body", "the edge", "the center",
];

fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub(crate) fn seeded_rng_for(text: &str, seed: u64) -> ChaCha8Rng {
    seeded_rng(&[&seed.to_le_bytes(), text.as_bytes()])
}

/// Deterministic bullet-list answer derived from `(prompt, seed)`.
pub fn synthetic_answer(prompt: &str, seed: u64) -> String {
    let mut rng = seeded_rng_for(prompt, seed);
    (0..3)
        .map(|_| {
            format!(
                "- {} {} near {}",
                ADJECTIVES.choose(&mut rng).unwrap(),
                PARTS.choose(&mut rng).unwrap(),
                CONTEXTS.choose(&mut rng).unwrap()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    pub max_in_flight: usize,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout: Duration::from_secs(60),
            retries: 0,
            max_in_flight: 1,
            temperature: None,
            top_p: None,
            max_tokens: None,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

/// OpenAI-compatible chat-completions client (blocking, non-streaming).
pub struct HttpProvider {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::InvalidSetting("max_in_flight must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .connect_timeout(config.timeout)
            .build()
            .map_err(|e| Error::InvalidSetting(format!("http client: {e}")))?;
        Ok(HttpProvider {
            config,
            client,
            calls: AtomicUsize::new(0),
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.config.temperature,
            top_p: self.config.top_p,
            max_tokens: self.config.max_tokens,
        };
        let mut req = self.client.post(self.url()).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(transport_error)?;
        let status = resp.status();
        let text = resp.text().map_err(transport_error)?;
        if !status.is_success() {
            return Err(Error::HttpBadStatus {
                status: status.as_u16(),
                body: text,
            });
        }
        parse_chat_response(&text)
    }
}

fn transport_error(e: reqwest::Error) -> Error {
    Error::HttpTimeout(e.to_string())
}

/// Extracts `choices[0].message.content`.
pub fn parse_chat_response(body: &str) -> Result<String> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))?;
    if content.trim().is_empty() {
        return Err(Error::MalformedResponse("empty message content".into()));
    }
    Ok(content.to_owned())
}

impl LlmProvider for HttpProvider {
    fn id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str) -> Result<LlmResponse> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Ok(text) => {
                    return Ok(LlmResponse {
                        text,
                        provider_id: self.id().to_owned(),
                        cached: false,
                    })
                }
                Err(e) if attempt < self.config.retries && is_retryable(&e) => attempt += 1,
                Err(e) => return Err(e),
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

fn is_retryable(e: &Error) -> bool {
    match e {
        Error::HttpTimeout(_) => true,
        Error::HttpBadStatus { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    prompt: String,
    text: String,
    provider_id: String,
}

/// Disk cache keyed by the SHA-256 of the prompt. One JSON file per entry,
/// written atomically.
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: LlmProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        CachedProvider {
            inner,
            dir: dir.into(),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn cache_key(prompt: &str) -> String {
        hex::encode(Sha256::digest(prompt.as_bytes()))
    }

    fn path_for(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.json", Self::cache_key(prompt)))
    }
}

impl<P: LlmProvider> LlmProvider for CachedProvider<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, prompt: &str) -> Result<LlmResponse> {
        let path = self.path_for(prompt);
        if path.exists() {
            let entry: CacheEntry = io::read_json(&path)?;
            // A hash collision would surface here; treat it as a miss.
            if entry.prompt == prompt {
                return Ok(LlmResponse {
                    text: entry.text,
                    provider_id: entry.provider_id,
                    cached: true,
                });
            }
        }
        let resp = self.inner.complete(prompt)?;
        io::write_json_atomic(
            &path,
            &CacheEntry {
                prompt: prompt.to_owned(),
                text: resp.text.clone(),
                provider_id: resp.provider_id.clone(),
            },
        )?;
        Ok(resp)
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }

    fn backend_calls(&self) -> usize {
        self.inner.backend_calls()
    }
}
