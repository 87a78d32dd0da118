use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::cache::ResponseCache;
use super::heuristic::HeuristicPredictor;
use super::Predictor;
use crate::error::{Error, Result};
use crate::graph::{judge_prompt, ConceptJudge, KnowledgeBase};
use crate::prompt::{first_object, parse_response, render_prompt, PredictionResult, Template};
use crate::retrieval::RetrievedContext;

pub const ENV_API_BASE: &str = "PEERKT_API_BASE";
pub const ENV_API_KEY: &str = "PEERKT_API_KEY";
pub const ENV_MODEL: &str = "PEERKT_MODEL";

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL of a chat-completion endpoint; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Read from the environment only; never serialized.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
    pub max_in_flight: usize,
    pub temperature: f64,
    /// Fall back to the heuristic when a response stays unparseable.
    pub impute: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: String::new(),
            api_key: None,
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
            min_interval_ms: 0,
            max_in_flight: 4,
            temperature: 0.0,
            impute: false,
            cache_dir: None,
        }
    }
}

impl fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout_secs", &self.timeout_secs)
            .field("max_retries", &self.max_retries)
            .field("temperature", &self.temperature)
            .finish_non_exhaustive()
    }
}

impl RemoteConfig {
    /// Overrides endpoint, key and model from the environment when set.
    pub fn apply_env(&mut self) {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.trim().is_empty());
        if let Some(base) = var(ENV_API_BASE) {
            self.base_url = base;
        }
        if let Some(key) = var(ENV_API_KEY) {
            self.api_key = Some(key);
        }
        if let Some(model) = var(ENV_MODEL) {
            self.model = model;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_url.trim().is_empty() {
            return Err(Error::Config(format!("remote backend needs an endpoint; set {ENV_API_BASE}")));
        }
        if self.model.trim().is_empty() {
            return Err(Error::Config(format!("remote backend needs a model name; set {ENV_MODEL}")));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

/// Counting gate bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.cv.notify_one();
    }
}

struct Shared {
    gate: Gate,
    next_slot: Mutex<Instant>,
}

/// Blocking chat-completion client with retries, pacing and an optional
/// response cache.
#[derive(Clone)]
pub struct ChatClient {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    cache: Option<ResponseCache>,
    shared: Arc<Shared>,
}

fn transient(e: &Error) -> bool {
    matches!(e, Error::Timeout | Error::RateLimited)
        || matches!(e, Error::Backend(m) if m.starts_with("transient"))
}

impl ChatClient {
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let cache = cfg.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
        Ok(Self {
            shared: Arc::new(Shared {
                gate: Gate {
                    free: Mutex::new(cfg.max_in_flight),
                    cv: Condvar::new(),
                },
                next_slot: Mutex::new(Instant::now()),
            }),
            cfg,
            agent,
            cache,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    pub fn cached(&self, prompt: &[u8]) -> Option<String> {
        self.cache
            .as_ref()
            .and_then(|c| c.get(prompt, &self.cfg.model))
            .map(|e| e.response)
    }

    pub fn store(&self, prompt: &[u8], response: &str) {
        if let Some(c) = &self.cache {
            if let Err(e) = c.put(prompt, &self.cfg.model, response) {
                log::warn!("could not write response cache: {e}");
            }
        }
    }

    fn pace(&self) {
        if self.cfg.min_interval_ms == 0 {
            return;
        }
        let wait = {
            let mut next = self.shared.next_slot.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + Duration::from_millis(self.cfg.min_interval_ms);
            start - now
        };
        std::thread::sleep(wait);
    }

    fn post_once(&self, system: &str, user: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        self.pace();
        self.shared.gate.acquire();
        let sent = req.send(body.to_string());
        self.shared.gate.release();
        let mut resp = sent.map_err(|e| match e {
            ureq::Error::Timeout(_) => Error::Timeout,
            other => Error::Backend(format!("transient: {other}")),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => Error::Timeout,
                other => Error::Backend(format!("transient: {other}")),
            })?;
        match status {
            200..=299 => {}
            429 => return Err(Error::RateLimited),
            500..=599 => return Err(Error::Backend(format!("transient: status {status}"))),
            _ => return Err(Error::Backend(format!("status {status}: {}", text.trim()))),
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Backend(format!("response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Backend("response has no choices[0].message.content".into()))
    }

    /// Sends one request, retrying timeouts, rate limiting and server
    /// errors with exponential backoff.
    pub fn request(&self, system: &str, user: &str) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.post_once(system, user) {
                Ok(text) => return Ok(text),
                Err(e) if transient(&e) && attempt < self.cfg.max_retries => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("request failed ({e}); retry {} in {delay} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Predictor that renders the prompt and asks a remote model.
pub struct RemotePredictor {
    client: ChatClient,
    template: Template,
    threshold: f64,
    fallback: HeuristicPredictor,
}

impl RemotePredictor {
    pub fn new(client: ChatClient, template: Template, threshold: f64, fallback: HeuristicPredictor) -> Self {
        Self {
            client,
            template,
            threshold,
            fallback,
        }
    }
}

impl Predictor for RemotePredictor {
    fn name(&self) -> &str {
        "remote"
    }

    fn predict(&self, ctx: &RetrievedContext, kb: &KnowledgeBase) -> Result<PredictionResult> {
        let doc = render_prompt(ctx, &self.template)?;
        let key = doc.cache_bytes();
        if let Some(text) = self.client.cached(&key) {
            if let Ok(r) = parse_response(&text, self.threshold) {
                return Ok(r);
            }
        }
        let mut last = Error::Unparseable;
        for _ in 0..=self.client.cfg.max_retries {
            match self.client.request(&doc.system_text, &doc.user_text) {
                Ok(text) => match parse_response(&text, self.threshold) {
                    Ok(r) => {
                        self.client.store(&key, &text);
                        return Ok(r);
                    }
                    Err(e) => last = e,
                },
                Err(e) => {
                    last = e;
                    break;
                }
            }
        }
        if self.client.cfg.impute {
            log::warn!("{}: using heuristic after remote failure ({last})", ctx.target.student_id);
            let mut r = self.fallback.predict(ctx, kb)?;
            r.imputed = true;
            return Ok(r);
        }
        Err(last)
    }
}

/// Concept-equivalence judge backed by the chat client.
pub struct LlmConceptJudge {
    client: ChatClient,
}

impl LlmConceptJudge {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }
}

const JUDGE_SYSTEM: &str = "You are a curriculum expert who aligns knowledge concepts across educational datasets.";

impl ConceptJudge for LlmConceptJudge {
    fn equivalent(&self, label: &str, candidate: &str) -> Result<bool> {
        let user = judge_prompt(label, candidate);
        let mut key = JUDGE_SYSTEM.as_bytes().to_vec();
        key.push(0);
        key.extend_from_slice(user.as_bytes());
        let text = match self.client.cached(&key) {
            Some(t) => t,
            None => self.client.request(JUDGE_SYSTEM, &user)?,
        };
        let verdict = match first_object(&text).and_then(|m| m.get("equivalent").cloned()) {
            Some(Value::Bool(b)) => Some(b),
            Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
                "true" | "yes" => Some(true),
                "false" | "no" => Some(false),
                _ => None,
            },
            _ => {
                let t = text.trim().to_ascii_lowercase();
                if t.starts_with("yes") {
                    Some(true)
                } else if t.starts_with("no") {
                    Some(false)
                } else {
                    None
                }
            }
        };
        let verdict = verdict.ok_or(Error::Unparseable)?;
        self.client.store(&key, &text);
        Ok(verdict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Serves canned (status, body) replies in order, repeating the last.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, text) = replies[n.min(replies.len() - 1)].clone();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn chat(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    fn config(base: &str) -> RemoteConfig {
        RemoteConfig {
            base_url: base.into(),
            model: "test-model".into(),
            backoff_ms: 1,
            ..RemoteConfig::default()
        }
    }

    #[test]
    fn well_formed_reply_is_returned() {
        let (base, hits) = serve(vec![(200, chat("{\"probability\": 0.7}"))]);
        let client = ChatClient::new(config(&base)).unwrap();
        let text = client.request("sys", "user").unwrap();
        assert!(parse_response(&text, 0.5).unwrap().probability == 0.7);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn server_errors_and_rate_limits_are_retried() {
        let (base, hits) = serve(vec![
            (503, "{}".into()),
            (429, "{}".into()),
            (200, chat("ok")),
        ]);
        let client = ChatClient::new(config(&base)).unwrap();
        assert_eq!(client.request("s", "u").unwrap(), "ok");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_are_bounded() {
        let (base, hits) = serve(vec![(500, "{}".into())]);
        let mut cfg = config(&base);
        cfg.max_retries = 2;
        let client = ChatClient::new(cfg).unwrap();
        assert!(client.request("s", "u").is_err());
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (base, hits) = serve(vec![(401, "{\"error\": \"bad key\"}".into())]);
        let client = ChatClient::new(config(&base)).unwrap();
        let err = client.request("s", "u").unwrap_err();
        assert!(matches!(err, Error::Backend(m) if m.contains("401")));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn unreachable_endpoint_fails_cleanly() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let mut cfg = config(&format!("http://{addr}"));
        cfg.max_retries = 1;
        let client = ChatClient::new(cfg).unwrap();
        assert!(client.request("s", "u").is_err());
    }

    #[test]
    fn missing_endpoint_is_a_config_error() {
        assert!(matches!(ChatClient::new(RemoteConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn api_key_is_never_serialized_or_printed() {
        let mut cfg = RemoteConfig::default();
        cfg.api_key = Some("sk-secret".into());
        assert!(!serde_json::to_string(&cfg).unwrap().contains("sk-secret"));
        assert!(!format!("{cfg:?}").contains("sk-secret"));
    }

    #[test]
    fn judge_reads_verdict() {
        let (base, _) = serve(vec![(200, chat("{\"equivalent\": true, \"reason\": \"same\"}"))]);
        let judge = LlmConceptJudge::new(ChatClient::new(config(&base)).unwrap());
        assert!(judge.equivalent("Gougu theorem", "pythagorean theorem").unwrap());
    }
}
