//! Chat-completion backends: HTTP, on-disk cache, offline stub and scripted.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// What a judge call is for. Not sent over the wire; lets offline backends
/// dispatch without sniffing prompt text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeTask {
    RubricJury,
    Equivalence,
    UnitExtract,
    Ontology,
    Mapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub task: JudgeTask,
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Jury slot for multi-judge calls, 0 otherwise.
    pub call_index: u32,
    /// Re-ask counter after an unparseable reply.
    pub attempt: u32,
}

impl ChatRequest {
    /// SHA-256 of the message list.
    pub fn prompt_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(m.role.as_bytes());
            h.update([0u8]);
            h.update(m.content.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Cache key over (prompt hash, model, temperature, call index, attempt).
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prompt_hash().as_bytes());
        h.update([0u8]);
        h.update(self.model.as_bytes());
        h.update([0u8]);
        h.update(self.temperature.to_bits().to_le_bytes());
        h.update(self.call_index.to_le_bytes());
        h.update(self.attempt.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn system_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == "system")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// A chat-completion provider.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;

    /// Whether this backend runs without network access.
    fn is_offline(&self) -> bool {
        false
    }
}

/// Client for an OpenAI-compatible `/v1/chat/completions` endpoint.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff_base: Duration,
}

impl HttpBackend {
    pub fn new(
        endpoint: &str,
        api_key: Option<String>,
        timeout: Duration,
        max_retries: u32,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url: chat_completions_url(endpoint),
            api_key,
            max_retries,
            backoff_base: Duration::from_millis(250),
        })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn send_once(&self, body: &serde_json::Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (true, e.to_string()))?;
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err((retryable, format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| (false, format!("bad JSON body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| (false, "response has no choices[0].message.content".to_string()))
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.saturating_pow(attempt - 1));
            }
            match self.send_once(&body) {
                Ok(content) => return Ok(content),
                Err((retryable, msg)) => {
                    log::warn!("judge call to {} failed (attempt {}): {msg}", self.url, attempt + 1);
                    last = msg;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(Error::Transport(last))
    }
}

fn chat_completions_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else if base.ends_with("/v1") {
        format!("{base}/chat/completions")
    } else {
        format!("{base}/v1/chat/completions")
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    prompt_hash: String,
    model: String,
    temperature: f64,
    call_index: u32,
    attempt: u32,
    response: String,
}

/// Content-addressed response cache wrapped around another backend.
///
/// Entries live at `<dir>/<key[..2]>/<key>.json`. Writes go through a
/// temporary file and a rename, so concurrent writers never expose a
/// partial entry.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: ChatBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn lookup(&self, request: &ChatRequest) -> Option<String> {
        let path = self.entry_path(&request.cache_key());
        let bytes = std::fs::read(path).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        Some(entry.response)
    }

    fn store(&self, request: &ChatRequest, response: &str) -> Result<()> {
        let key = request.cache_key();
        let path = self.entry_path(&key);
        let parent = path.parent().expect("entry path has a parent");
        std::fs::create_dir_all(parent)?;
        let entry = CacheEntry {
            prompt_hash: request.prompt_hash(),
            model: request.model.clone(),
            temperature: request.temperature,
            call_index: request.call_index,
            attempt: request.attempt,
            response: response.to_string(),
            key,
        };
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        std::io::Write::write_all(&mut tmp, &serde_json::to_vec_pretty(&entry)?)?;
        tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        if let Some(hit) = self.lookup(request) {
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        self.store(request, &response)?;
        Ok(response)
    }

    fn is_offline(&self) -> bool {
        self.inner.is_offline()
    }
}

/// Backend driven by a closure; useful for fixed verdicts in tests and for
/// replaying recorded judgements.
pub struct FnBackend<F> {
    f: F,
    calls: Mutex<Vec<ChatRequest>>,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Requests seen so far, in arrival order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls.lock().expect("call log poisoned").clone()
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls
            .lock()
            .expect("call log poisoned")
            .push(request.clone());
        (self.f)(request)
    }

    fn is_offline(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn req(content: &str, call_index: u32) -> ChatRequest {
        ChatRequest {
            task: JudgeTask::Equivalence,
            model: "m".into(),
            messages: vec![ChatMessage::user(content)],
            temperature: 0.0,
            call_index,
            attempt: 0,
        }
    }

    #[test]
    fn url_forms() {
        assert_eq!(chat_completions_url("http://h:8000"), "http://h:8000/v1/chat/completions");
        assert_eq!(chat_completions_url("http://h:8000/v1/"), "http://h:8000/v1/chat/completions");
        assert_eq!(
            chat_completions_url("http://h/v1/chat/completions"),
            "http://h/v1/chat/completions"
        );
    }

    #[test]
    fn cache_key_separates_call_index_and_temperature() {
        let a = req("x", 0);
        let b = req("x", 1);
        let mut c = req("x", 0);
        c.temperature = 0.7;
        assert_ne!(a.cache_key(), b.cache_key());
        assert_ne!(a.cache_key(), c.cache_key());
        assert_eq!(a.cache_key(), req("x", 0).cache_key());
        assert_eq!(a.prompt_hash(), b.prompt_hash());
    }

    #[test]
    fn cache_serves_second_call_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        let backend = CachedBackend::new(
            FnBackend::new(move |r: &ChatRequest| {
                h.fetch_add(1, Ordering::SeqCst);
                Ok(format!("reply to {}", r.user_text()))
            }),
            dir.path(),
        )
        .unwrap();
        assert_eq!(backend.complete(&req("q", 0)).unwrap(), "reply to q");
        assert_eq!(backend.complete(&req("q", 0)).unwrap(), "reply to q");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        backend.complete(&req("q", 1)).unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 2);

        // a fresh cache over the same directory sees the stored entries
        let cold = CachedBackend::new(
            FnBackend::new(|_: &ChatRequest| Ok("fresh".to_string())),
            dir.path(),
        )
        .unwrap();
        assert_eq!(cold.complete(&req("q", 0)).unwrap(), "reply to q");
    }

    #[test]
    fn cache_is_safe_under_concurrent_writers() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(
            CachedBackend::new(
                FnBackend::new(|r: &ChatRequest| Ok(r.user_text().to_uppercase())),
                dir.path(),
            )
            .unwrap(),
        );
        std::thread::scope(|s| {
            for t in 0..8 {
                let b = backend.clone();
                s.spawn(move || {
                    for i in 0..20 {
                        let out = b.complete(&req(&format!("k{}", i % 5), 0)).unwrap();
                        assert_eq!(out, format!("K{}", i % 5));
                        let _ = t;
                    }
                });
            }
        });
        for i in 0..5 {
            assert_eq!(backend.lookup(&req(&format!("k{i}"), 0)).unwrap(), format!("K{i}"));
        }
    }
}
