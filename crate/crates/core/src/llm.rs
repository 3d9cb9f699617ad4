//! LLM endpoint client: pluggable transports, retry with backoff, a simple
//! rate limiter, a prompt-hash response cache, and the versioned prompt
//! template registry.
//!
//! Prompt text is never inlined in code; templates ship as text assets and
//! are registered here with a content-derived version. Cache keys cover
//! (template version, model id, filled prompt), so editing a template or
//! switching models invalidates exactly the affected entries.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Names of the built-in templates.
pub const TPL_REWRITE_QUESTION: &str = "rewrite_question";
pub const TPL_GENERATE_COT: &str = "generate_cot";
pub const TPL_REASONED_IDK: &str = "reasoned_idk";
pub const TPL_JUDGE: &str = "judge";

/// A named prompt template with a content-derived version tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let version = hex::encode(&hasher.finalize()[..6]);
        Self {
            name: name.into(),
            version,
            text,
        }
    }

    /// Substitute `{{key}}` / `{key}` placeholders in one pass (substituted
    /// values are never rescanned). Every filler must be used; an unused
    /// filler means the caller and template disagree.
    pub fn fill(&self, fillers: &[(&str, &str)]) -> Result<String> {
        let map: BTreeMap<&str, &str> = fillers.iter().copied().collect();
        let mut used: BTreeMap<&str, bool> = fillers.iter().map(|(k, _)| (*k, false)).collect();
        let mut out = String::with_capacity(self.text.len());
        let bytes = self.text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'{' {
                let double = bytes.get(i + 1) == Some(&b'{');
                let name_start = if double { i + 2 } else { i + 1 };
                let close: &str = if double { "}}" } else { "}" };
                if let Some(rel) = self.text[name_start..].find(close) {
                    let name = &self.text[name_start..name_start + rel];
                    if let Some(value) = map.get(name) {
                        out.push_str(value);
                        used.insert(name, true);
                        i = name_start + rel + close.len();
                        continue;
                    }
                }
            }
            let ch = self.text[i..].chars().next().expect("in bounds");
            out.push(ch);
            i += ch.len_utf8();
        }
        for (k, was_used) in used {
            if !was_used {
                return Err(Error::validation(format!(
                    "template '{}' has no placeholder named '{k}'",
                    self.name
                )));
            }
        }
        Ok(out)
    }
}

/// Registry of templates by name.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    map: BTreeMap<String, PromptTemplate>,
}

impl TemplateRegistry {
    /// The four templates shipped with the crate.
    pub fn builtin() -> Self {
        let mut reg = Self::default();
        reg.register(PromptTemplate::new(
            TPL_REWRITE_QUESTION,
            include_str!("../assets/prompts/rewrite_question.txt"),
        ));
        reg.register(PromptTemplate::new(
            TPL_GENERATE_COT,
            include_str!("../assets/prompts/generate_cot.txt"),
        ));
        reg.register(PromptTemplate::new(
            TPL_REASONED_IDK,
            include_str!("../assets/prompts/reasoned_idk.txt"),
        ));
        reg.register(PromptTemplate::new(
            TPL_JUDGE,
            include_str!("../assets/prompts/judge.txt"),
        ));
        reg
    }

    pub fn register(&mut self, template: PromptTemplate) {
        self.map.insert(template.name.clone(), template);
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate> {
        self.map
            .get(name)
            .ok_or_else(|| Error::validation(format!("no template registered under '{name}'")))
    }
}

/// One chat-completion round trip. Implementations must be safe to call
/// from multiple threads.
pub trait Transport: Send + Sync {
    fn complete(&self, model: &str, prompt: &str, config: &EndpointConfig) -> Result<String>;
}

/// Endpoint settings. `credential_env` holds the *name* of the environment
/// variable carrying the API key; the key itself is read at call time and
/// never stored or serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    pub model: String,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: usize,
    #[serde(default)]
    pub min_interval_ms: u64,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Sampling temperature passed through to the provider; omitted when
    /// unset (provider default applies).
    #[serde(default)]
    pub temperature: Option<f64>,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_retry_budget() -> usize {
    2
}

fn default_backoff_ms() -> u64 {
    250
}

impl EndpointConfig {
    pub fn offline_stub(name: &str, model: &str) -> Self {
        Self {
            name: name.into(),
            model: model.into(),
            base_url: String::new(),
            credential_env: None,
            timeout_secs: 60,
            retry_budget: 2,
            min_interval_ms: 0,
            backoff_ms: 0,
            temperature: None,
        }
    }
}

/// OpenAI-style chat-completions transport over HTTP.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::validation(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn complete(&self, model: &str, prompt: &str, config: &EndpointConfig) -> Result<String> {
        let url = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        let mut body = serde_json::json!({
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(t) = config.temperature {
            body["temperature"] = serde_json::json!(t);
        }
        let mut request = self.client.post(&url).json(&body);
        if let Some(var) = &config.credential_env {
            let key = std::env::var(var).map_err(|_| {
                Error::validation(format!(
                    "credential environment variable '{var}' is not set"
                ))
            })?;
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| Error::format(format!("request failed: {e}")))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Error::format(format!("unreadable response body: {e}")))?;
        if !status.is_success() {
            return Err(Error::format(format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("non-JSON completion response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::format("completion response lacks choices[0].message.content"))
    }
}

/// Scripted transport for offline runs and tests: pops canned replies in
/// order and counts round trips.
pub struct ScriptedTransport {
    replies: Mutex<VecDeque<std::result::Result<String, String>>>,
    calls: AtomicUsize,
}

impl ScriptedTransport {
    pub fn new<I>(replies: I) -> Self
    where
        I: IntoIterator<Item = std::result::Result<String, String>>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn ok<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            replies
                .into_iter()
                .map(|s| Ok(s.into()))
                .collect::<Vec<_>>(),
        )
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for ScriptedTransport {
    fn complete(&self, _model: &str, _prompt: &str, _config: &EndpointConfig) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.replies.lock().expect("not poisoned").pop_front() {
            Some(Ok(reply)) => Ok(reply),
            Some(Err(msg)) => Err(Error::format(msg)),
            None => Err(Error::format("transport script exhausted")),
        }
    }
}

/// File-backed response cache keyed by (template version, model, prompt).
/// Entries store the full prompt so hash collisions degrade to misses.
#[derive(Debug)]
pub struct PromptCache {
    dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    template_version: String,
    model: String,
    prompt: String,
    reply: String,
}

impl PromptCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn key(template_version: &str, model: &str, prompt: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(template_version.as_bytes());
        hasher.update([0]);
        hasher.update(model.as_bytes());
        hasher.update([0]);
        hasher.update(prompt.as_bytes());
        hex::encode(hasher.finalize())
    }

    fn path_of(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, template_version: &str, model: &str, prompt: &str) -> Option<String> {
        let key = Self::key(template_version, model, prompt);
        let bytes = fs::read(self.path_of(&key)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        let matches = entry.template_version == template_version
            && entry.model == model
            && entry.prompt == prompt;
        matches.then_some(entry.reply)
    }

    pub fn put(
        &self,
        template_version: &str,
        model: &str,
        prompt: &str,
        reply: &str,
    ) -> Result<()> {
        let key = Self::key(template_version, model, prompt);
        let entry = CacheEntry {
            template_version: template_version.to_string(),
            model: model.to_string(),
            prompt: prompt.to_string(),
            reply: reply.to_string(),
        };
        // write-temp-then-rename keeps concurrent readers consistent
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&serde_json::to_vec_pretty(&entry)?)?;
        tmp.persist(self.path_of(&key))
            .map_err(|e| Error::validation(format!("cache write failed: {e}")))?;
        Ok(())
    }
}

/// A configured endpoint: transport + retry/rate-limit policy + optional
/// response cache.
pub struct LLMEndpoint {
    pub config: EndpointConfig,
    transport: Box<dyn Transport>,
    cache: Option<PromptCache>,
    last_call: Mutex<Option<Instant>>,
}

impl LLMEndpoint {
    pub fn new(config: EndpointConfig, transport: Box<dyn Transport>) -> Self {
        Self {
            config,
            transport,
            cache: None,
            last_call: Mutex::new(None),
        }
    }

    /// Standard HTTP-backed endpoint.
    pub fn http(config: EndpointConfig) -> Result<Self> {
        let transport = HttpTransport::new(Duration::from_secs(config.timeout_secs))?;
        Ok(Self::new(config, Box::new(transport)))
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        self.cache = Some(PromptCache::new(dir)?);
        Ok(self)
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }

    fn respect_rate_limit(&self) {
        if self.config.min_interval_ms == 0 {
            return;
        }
        let interval = Duration::from_millis(self.config.min_interval_ms);
        let mut last = self.last_call.lock().expect("not poisoned");
        if let Some(at) = *last {
            let elapsed = at.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    /// One prompt round trip with retry/backoff; no caching.
    pub fn call(&self, prompt: &str) -> Result<String> {
        let attempts_allowed = 1 + self.config.retry_budget;
        let mut attempt_log = Vec::new();
        for attempt in 0..attempts_allowed {
            if attempt > 0 && self.config.backoff_ms > 0 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff.min(5_000)));
            }
            self.respect_rate_limit();
            match self
                .transport
                .complete(&self.config.model, prompt, &self.config)
            {
                Ok(reply) => return Ok(reply),
                Err(e) => attempt_log.push(format!("attempt {}: {e}", attempt + 1)),
            }
        }
        Err(Error::Transport {
            attempts: attempts_allowed,
            msg: attempt_log.join("; "),
        })
    }

    /// Cached call with an explicit prompt (used by retries that append
    /// reminders, which must produce a fresh cache key).
    pub fn call_cached_raw(&self, template_version: &str, prompt: &str) -> Result<String> {
        let hash = PromptCache::key(template_version, &self.config.model, prompt);
        if let Some(cache) = &self.cache {
            if let Some(reply) = cache.get(template_version, &self.config.model, prompt) {
                log::debug!(
                    "endpoint {} template {template_version} prompt {hash}: cache hit",
                    self.config.name
                );
                return Ok(reply);
            }
        }
        log::debug!(
            "endpoint {} template {template_version} prompt {hash}: calling",
            self.config.name
        );
        let reply = self.call(prompt)?;
        if let Some(cache) = &self.cache {
            cache.put(template_version, &self.config.model, prompt, &reply)?;
        }
        Ok(reply)
    }

    /// Fill a template and call through the cache.
    pub fn call_cached(
        &self,
        template: &PromptTemplate,
        fillers: &[(&str, &str)],
    ) -> Result<String> {
        let prompt = template.fill(fillers)?;
        self.call_cached_raw(&template.version, &prompt)
    }
}
