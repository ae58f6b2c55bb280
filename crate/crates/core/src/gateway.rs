//! Chat-completion access with retries, rate limiting and bounded fan-out.
//!
//! Backends speak the OpenAI-compatible chat-completions protocol over HTTP,
//! or are a rule-driven [`MockBackend`] for hermetic runs. Remote failures
//! never surface as `Err`: they come back as a [`CompletionResult`] with
//! `failed = true`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("backend `{backend}`: {message}")]
    Backend { backend: String, message: String },
    #[error("duplicate prompt id `{0}` in batch")]
    DuplicateId(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

fn default_max_tokens() -> u32 {
    512
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    1
}
fn default_retry_base_ms() -> u64 {
    500
}
fn default_retry_cap_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    #[serde(default)]
    pub kind: BackendKind,
    /// Full chat-completions URL, e.g. `http://host:8000/v1/chat/completions`.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Defaults to `name` when empty.
    #[serde(default)]
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// `None` means unlimited.
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default = "default_retry_cap_ms")]
    pub retry_cap_ms: u64,
    /// Seeds backoff jitter.
    #[serde(default)]
    pub jitter_seed: u64,
    #[serde(default)]
    pub mock: Option<MockSpec>,
}

impl BackendConfig {
    pub fn mock(name: &str, spec: MockSpec) -> Self {
        Self {
            name: name.to_string(),
            kind: BackendKind::Mock,
            endpoint: None,
            model_id: name.to_string(),
            temperature: 0.0,
            max_output_tokens: default_max_tokens(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            requests_per_minute: None,
            api_key_env: None,
            retry_base_ms: default_retry_base_ms(),
            retry_cap_ms: default_retry_cap_ms(),
            jitter_seed: 0,
            mock: Some(spec),
        }
    }

    pub fn http(name: &str, endpoint: &str) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.to_string()),
            mock: None,
            ..Self::mock(name, MockSpec::default())
        }
    }

    pub fn model(&self) -> &str {
        if self.model_id.is_empty() {
            &self.name
        } else {
            &self.model_id
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |msg: String| Err(GatewayError::Config(format!("{}: {msg}", self.name)));
        if self.name.trim().is_empty() {
            return Err(GatewayError::Config("backend name is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive".into());
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        if self.requests_per_minute == Some(0) {
            return bad("requests_per_minute must be positive (omit for unlimited)".into());
        }
        match self.kind {
            BackendKind::Http => {
                let Some(endpoint) = &self.endpoint else {
                    return bad("http backend needs an endpoint".into());
                };
                match url::Url::parse(endpoint) {
                    Ok(u) if u.scheme() == "http" || u.scheme() == "https" => {}
                    Ok(u) => return bad(format!("unsupported endpoint scheme `{}`", u.scheme())),
                    Err(e) => return bad(format!("bad endpoint `{endpoint}`: {e}")),
                }
            }
            BackendKind::Mock => {
                if let Some(spec) = &self.mock {
                    spec.compile()
                        .map_err(|e| GatewayError::Config(format!("{}: {e}", self.name)))?;
                }
            }
        }
        Ok(())
    }
}

/// A configuration document listing backends (JSON or TOML).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsFile {
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
}

impl BackendsFile {
    /// Loads `.json` as JSON and anything else as TOML. Mock `rules_file`
    /// paths resolve relative to the config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|source| GatewayError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut file: BackendsFile = parse_doc(path, &raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        file.resolve_paths(base);
        file.validate()?;
        Ok(file)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for b in &mut self.backends {
            if let Some(spec) = &mut b.mock {
                if let Some(rules) = &spec.rules_file {
                    if rules.is_relative() {
                        spec.rules_file = Some(base.join(rules));
                    }
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let mut names = HashSet::new();
        for b in &self.backends {
            b.validate()?;
            if !names.insert(b.name.as_str()) {
                return Err(GatewayError::Config(format!(
                    "duplicate backend name `{}`",
                    b.name
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&BackendConfig, GatewayError> {
        self.backends
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| GatewayError::UnknownBackend(name.to_string()))
    }
}

pub(crate) fn parse_doc<T: serde::de::DeserializeOwned>(
    path: &Path,
    raw: &str,
) -> Result<T, GatewayError> {
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(raw)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(raw).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Backends

#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    /// Task tag; only the mock looks at it.
    pub tag: Option<&'a str>,
    pub system: &'a str,
    pub user: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    Transport(String),
    Timeout,
    Status { code: u16, body: String },
    Protocol(String),
}

impl CallError {
    /// Transport errors, timeouts, 429 and 5xx are retried; other 4xx are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            CallError::Transport(_) | CallError::Timeout => true,
            CallError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            CallError::Protocol(_) => false,
        }
    }
}

impl std::fmt::Display for CallError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CallError::Transport(m) => write!(f, "transport error: {m}"),
            CallError::Timeout => write!(f, "timed out"),
            CallError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            CallError::Protocol(m) => write!(f, "bad response: {m}"),
        }
    }
}

/// Outcome of a single request.
#[derive(Debug, Clone)]
pub struct Attempt {
    pub outcome: Result<String, CallError>,
    /// Set by backends that model latency instead of sleeping.
    pub simulated_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BackendStats {
    pub calls: usize,
    pub peak_in_flight: usize,
}

pub trait ChatBackend: Send + Sync {
    fn call(&self, request: &ChatRequest<'_>) -> Attempt;

    /// True when latency is modelled rather than spent.
    fn is_simulated(&self) -> bool {
        false
    }

    fn stats(&self) -> Option<BackendStats> {
        None
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
    token: Option<String>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::Config(format!("{}: missing endpoint", config.name)))?;
        let token = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!(
                    "{}: environment variable `{var}` is not set",
                    config.name
                ))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Config(format!("{}: {e}", config.name)))?;
        Ok(Self {
            client,
            endpoint,
            model: config.model().to_string(),
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
            token,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn call(&self, request: &ChatRequest<'_>) -> Attempt {
        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: request.system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: request.user,
        });
        let body = WireRequest {
            model: &self.model,
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let outcome = match req.send() {
            Err(e) if e.is_timeout() => Err(CallError::Timeout),
            Err(e) => Err(CallError::Transport(e.to_string())),
            Ok(resp) => {
                let status = resp.status();
                if !status.is_success() {
                    let body = resp.text().unwrap_or_default();
                    Err(CallError::Status {
                        code: status.as_u16(),
                        body: body.chars().take(500).collect(),
                    })
                } else {
                    match resp.json::<WireResponse>() {
                        Ok(parsed) => parsed
                            .choices
                            .into_iter()
                            .next()
                            .map(|c| c.message.content.unwrap_or_default())
                            .ok_or_else(|| CallError::Protocol("no choices in response".into())),
                        Err(e) if e.is_timeout() => Err(CallError::Timeout),
                        Err(e) => Err(CallError::Protocol(e.to_string())),
                    }
                }
            }
        };
        Attempt {
            outcome,
            simulated_ms: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockClock {
    /// Sleep for the configured delay.
    #[default]
    Sleep,
    /// Report the delay as latency without sleeping.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Only requests carrying this task tag match; `None` matches any task.
    #[serde(default)]
    pub task: Option<String>,
    /// Regex searched in the user prompt.
    pub pattern: String,
    pub response: String,
}

fn default_failure_status() -> u16 {
    503
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Extra rules (`rules = [...]`, TOML or JSON) appended after inline ones.
    #[serde(default)]
    pub rules_file: Option<PathBuf>,
    #[serde(default)]
    pub default_response: String,
    #[serde(default)]
    pub delay_ms: u64,
    /// Adds a prompt-dependent `0..=delay_jitter_ms` to each delay.
    #[serde(default)]
    pub delay_jitter_ms: u64,
    #[serde(default)]
    pub clock: MockClock,
    /// Each distinct prompt fails this many times before succeeding.
    #[serde(default)]
    pub fail_first_attempts: u32,
    #[serde(default = "default_failure_status")]
    pub failure_status: u16,
    /// Prompts matching this regex always fail.
    #[serde(default)]
    pub fail_pattern: Option<String>,
}

impl Default for MockSpec {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            rules_file: None,
            default_response: String::new(),
            delay_ms: 0,
            delay_jitter_ms: 0,
            clock: MockClock::Sleep,
            fail_first_attempts: 0,
            failure_status: default_failure_status(),
            fail_pattern: None,
        }
    }
}

#[derive(Deserialize)]
struct RulesDoc {
    rules: Vec<MockRule>,
}

impl MockSpec {
    pub fn echo(response: &str) -> Self {
        Self {
            default_response: response.to_string(),
            ..Self::default()
        }
    }

    fn compile(&self) -> Result<CompiledRules, String> {
        let mut rules = self.rules.clone();
        if let Some(path) = &self.rules_file {
            let raw = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let doc: RulesDoc = parse_doc(path, &raw).map_err(|e| e.to_string())?;
            rules.extend(doc.rules);
        }
        let compiled = rules
            .into_iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (r.task, re, r.response))
                    .map_err(|e| format!("bad mock pattern `{}`: {e}", r.pattern))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fail = self
            .fail_pattern
            .as_deref()
            .map(Regex::new)
            .transpose()
            .map_err(|e| format!("bad fail_pattern: {e}"))?;
        Ok(CompiledRules {
            rules: compiled,
            fail,
        })
    }
}

struct CompiledRules {
    rules: Vec<(Option<String>, Regex, String)>,
    fail: Option<Regex>,
}

/// FNV-1a; stable across platforms and releases.
pub(crate) fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Rule-table backend: first matching rule wins, else `default_response`.
pub struct MockBackend {
    spec: MockSpec,
    compiled: CompiledRules,
    attempts: Mutex<HashMap<u64, u32>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(spec: MockSpec) -> Result<Self, GatewayError> {
        let compiled = spec.compile().map_err(GatewayError::Config)?;
        Ok(Self {
            spec,
            compiled,
            attempts: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn respond(&self, request: &ChatRequest<'_>) -> &str {
        self.compiled
            .rules
            .iter()
            .find(|(task, re, _)| {
                task.as_deref().is_none_or(|t| Some(t) == request.tag) && re.is_match(request.user)
            })
            .map(|(_, _, resp)| resp.as_str())
            .unwrap_or(&self.spec.default_response)
    }

    fn delay_ms(&self, key: u64) -> u64 {
        let jitter = match self.spec.delay_jitter_ms {
            0 => 0,
            j => key % (j + 1),
        };
        self.spec.delay_ms + jitter
    }
}

impl ChatBackend for MockBackend {
    fn call(&self, request: &ChatRequest<'_>) -> Attempt {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);

        let key = fnv1a(&[request.tag.unwrap_or(""), request.system, request.user]);
        let seen = {
            let mut attempts = self.attempts.lock().expect("mock state");
            let n = attempts.entry(key).or_insert(0);
            *n += 1;
            *n
        };
        let delay = self.delay_ms(key);
        let simulated_ms = match self.spec.clock {
            MockClock::Sleep => {
                if delay > 0 {
                    thread::sleep(Duration::from_millis(delay));
                }
                None
            }
            MockClock::Simulated => Some(delay),
        };
        let forced_failure = self
            .compiled
            .fail
            .as_ref()
            .is_some_and(|re| re.is_match(request.user));
        let outcome = if forced_failure || seen <= self.spec.fail_first_attempts {
            Err(CallError::Status {
                code: self.spec.failure_status,
                body: "mock failure".into(),
            })
        } else {
            Ok(self.respond(request).to_string())
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Attempt {
            outcome,
            simulated_ms,
        }
    }

    fn is_simulated(&self) -> bool {
        self.spec.clock == MockClock::Simulated
    }

    fn stats(&self) -> Option<BackendStats> {
        Some(BackendStats {
            calls: self.calls.load(Ordering::SeqCst),
            peak_in_flight: self.peak.load(Ordering::SeqCst),
        })
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    /// Latency of the final attempt.
    pub latency_ms: u64,
    pub attempts: u32,
    pub backend: String,
    pub failed: bool,
    /// Time the request occupied its worker, including retries and backoff.
    pub busy_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Spaces request issues at least `60s / rpm` apart.
struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(rpm: Option<u32>) -> Self {
        Self {
            interval: rpm.map(|r| Duration::from_secs_f64(60.0 / f64::from(r))),
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let slot = {
            let mut next = self.next.lock().expect("limiter");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub base_ms: u64,
    pub cap_ms: u64,
}

impl RetryPolicy {
    /// Upper bound of the wait before retry number `retry` (0-based).
    pub fn ceiling_ms(&self, retry: u32) -> u64 {
        let exp = self
            .base_ms
            .saturating_mul(1u64.checked_shl(retry).unwrap_or(u64::MAX));
        exp.min(self.cap_ms)
    }

    pub fn delay_ms(&self, retry: u32, rng: &mut ChaCha8Rng) -> u64 {
        rng::uniform_below(rng, self.ceiling_ms(retry) + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default)]
    pub system: String,
    pub user: String,
}

pub struct Gateway {
    config: BackendConfig,
    backend: Arc<dyn ChatBackend>,
    limiter: RateLimiter,
    retry: RetryPolicy,
    jitter: Mutex<ChaCha8Rng>,
}

impl Gateway {
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn ChatBackend> = match config.kind {
            BackendKind::Http => Arc::new(HttpBackend::new(config)?),
            BackendKind::Mock => {
                Arc::new(MockBackend::new(config.mock.clone().unwrap_or_default())?)
            }
        };
        Ok(Self::with_backend(config.clone(), backend))
    }

    pub fn with_backend(config: BackendConfig, backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            limiter: RateLimiter::new(config.requests_per_minute),
            retry: RetryPolicy {
                base_ms: config.retry_base_ms,
                cap_ms: config.retry_cap_ms,
            },
            jitter: Mutex::new(rng::seeded(config.jitter_seed)),
            config,
            backend,
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn backend_stats(&self) -> Option<BackendStats> {
        self.backend.stats()
    }

    pub fn is_simulated(&self) -> bool {
        self.backend.is_simulated()
    }

    pub fn complete(&self, system: &str, user: &str) -> CompletionResult {
        self.complete_tagged(None, system, user)
    }

    pub fn complete_tagged(&self, tag: Option<&str>, system: &str, user: &str) -> CompletionResult {
        let failed = |attempts, latency_ms, busy_ms, error: String| CompletionResult {
            text: String::new(),
            latency_ms,
            attempts,
            backend: self.config.name.clone(),
            failed: true,
            busy_ms,
            error: Some(error),
        };
        if user.trim().is_empty() {
            return failed(1, 0, 0, "empty user prompt".into());
        }
        let request = ChatRequest { tag, system, user };
        let simulated = self.backend.is_simulated();
        let mut busy_ms = 0u64;
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            if !simulated {
                self.limiter.acquire();
            }
            let started = Instant::now();
            let attempt = self.backend.call(&request);
            let latency_ms = attempt
                .simulated_ms
                .unwrap_or_else(|| started.elapsed().as_millis() as u64);
            busy_ms += latency_ms;
            match attempt.outcome {
                Ok(text) => {
                    return CompletionResult {
                        text,
                        latency_ms,
                        attempts,
                        backend: self.config.name.clone(),
                        failed: false,
                        busy_ms,
                        error: None,
                    }
                }
                Err(e) => {
                    if !e.is_retryable() || attempts > self.config.max_retries {
                        log::warn!(
                            "{}: giving up after {attempts} attempt(s): {e}",
                            self.config.name
                        );
                        return failed(attempts, latency_ms, busy_ms, e.to_string());
                    }
                    let wait = {
                        let mut rng = self.jitter.lock().expect("jitter rng");
                        self.retry.delay_ms(attempts - 1, &mut rng)
                    };
                    log::debug!(
                        "{}: retry {attempts} in {wait} ms after {e}",
                        self.config.name
                    );
                    if !simulated {
                        thread::sleep(Duration::from_millis(wait));
                    }
                    busy_ms += wait;
                }
            }
        }
    }

    /// Runs prompts with at most `max_in_flight` outstanding; output order
    /// matches input order.
    pub fn complete_batch(
        &self,
        prompts: &[PromptItem],
    ) -> Result<Vec<(String, CompletionResult)>, GatewayError> {
        let mut ids = HashSet::with_capacity(prompts.len());
        for p in prompts {
            if !ids.insert(p.id.as_str()) {
                return Err(GatewayError::DuplicateId(p.id.clone()));
            }
        }
        let slots: Vec<Mutex<Option<CompletionResult>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(prompts.len());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(p) = prompts.get(i) else { break };
                    let result = self.complete_tagged(p.tag.as_deref(), &p.system, &p.user);
                    *slots[i].lock().expect("result slot") = Some(result);
                });
            }
        });
        Ok(prompts
            .iter()
            .zip(slots)
            .map(|(p, slot)| {
                let result = slot
                    .into_inner()
                    .expect("result slot")
                    .expect("every prompt completed");
                (p.id.clone(), result)
            })
            .collect())
    }
}

/// Builds gateways for every backend in a file, keyed by name.
pub fn gateways(file: &BackendsFile) -> Result<BTreeMap<String, Arc<Gateway>>, GatewayError> {
    file.backends
        .iter()
        .map(|b| Ok((b.name.clone(), Arc::new(Gateway::from_config(b)?))))
        .collect()
}

// ---------------------------------------------------------------------------
// Benchmarking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub backend: String,
    pub model_id: String,
    /// `wall` when measured, `simulated` when derived from modelled latency.
    pub clock: String,
    pub prompts: usize,
    pub max_in_flight: usize,
    pub total_wall_ms: u64,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFile {
    pub backends: Vec<BenchReport>,
}

/// Makespan of a FIFO queue served by `lanes` workers, with request starts
/// spaced by the rate limit.
pub fn simulate_makespan(busy_ms: &[u64], lanes: usize, rpm: Option<u32>) -> u64 {
    let spacing = rpm.map_or(0.0, |r| 60_000.0 / f64::from(r));
    let mut free: BinaryHeap<Reverse<u64>> = (0..lanes.max(1)).map(|_| Reverse(0)).collect();
    let mut next_issue = 0.0f64;
    let mut makespan = 0u64;
    for &busy in busy_ms {
        let Reverse(lane_free) = free.pop().expect("at least one lane");
        let start = (lane_free as f64).max(next_issue);
        next_issue = start + spacing;
        let end = start.ceil() as u64 + busy;
        makespan = makespan.max(end);
        free.push(Reverse(end));
    }
    makespan
}

/// Nearest-rank percentile of a sorted slice.
pub fn percentile(sorted: &[u64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1] as f64
}

pub fn median(sorted: &[u64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2] as f64,
        n => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
    }
}

pub fn bench(gateway: &Gateway, prompts: &[PromptItem]) -> Result<BenchReport, GatewayError> {
    if prompts.is_empty() {
        return Err(GatewayError::Config(
            "bench needs at least one prompt".into(),
        ));
    }
    let started = Instant::now();
    let results = gateway.complete_batch(prompts)?;
    let wall = started.elapsed().as_millis() as u64;
    let simulated = gateway.is_simulated();
    let total_wall_ms = if simulated {
        let busy: Vec<u64> = results.iter().map(|(_, r)| r.busy_ms).collect();
        simulate_makespan(
            &busy,
            gateway.config.max_in_flight,
            gateway.config.requests_per_minute,
        )
    } else {
        wall
    };
    let mut latencies: Vec<u64> = results.iter().map(|(_, r)| r.latency_ms).collect();
    latencies.sort_unstable();
    let mean = latencies.iter().sum::<u64>() as f64 / latencies.len() as f64;
    Ok(BenchReport {
        backend: gateway.config.name.clone(),
        model_id: gateway.config.model().to_string(),
        clock: if simulated { "simulated" } else { "wall" }.to_string(),
        prompts: prompts.len(),
        max_in_flight: gateway.config.max_in_flight,
        total_wall_ms,
        mean_latency_ms: mean,
        median_latency_ms: median(&latencies),
        p95_latency_ms: percentile(&latencies, 95.0),
        failures: results.iter().filter(|(_, r)| r.failed).count(),
    })
}

pub fn write_bench(path: impl AsRef<Path>, reports: Vec<BenchReport>) -> Result<(), GatewayError> {
    let path = path.as_ref();
    let body = serde_json::to_string_pretty(&BenchFile { backends: reports })
        .expect("bench report serializes");
    fs::write(path, body + "\n").map_err(|source| GatewayError::Write {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_prompts(path: impl AsRef<Path>) -> Result<Vec<PromptItem>, GatewayError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| GatewayError::Io {
        path: path.display().to_string(),
        source,
    })?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| GatewayError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast(spec: MockSpec) -> BackendConfig {
        BackendConfig {
            retry_base_ms: 1,
            retry_cap_ms: 4,
            ..BackendConfig::mock("m", spec)
        }
    }

    #[test]
    fn echo_mock() {
        let g = Gateway::from_config(&fast(MockSpec::echo("yes"))).unwrap();
        let r = g.complete("sys", "Is this about mental health?");
        assert_eq!((r.text.as_str(), r.failed, r.attempts), ("yes", false, 1));
    }

    #[test]
    fn retries_until_success() {
        let spec = MockSpec {
            fail_first_attempts: 2,
            ..MockSpec::echo("ok")
        };
        let g = Gateway::from_config(&BackendConfig {
            max_retries: 3,
            ..fast(spec)
        })
        .unwrap();
        let r = g.complete("s", "u");
        assert_eq!((r.attempts, r.failed, r.text.as_str()), (3, false, "ok"));
    }

    #[test]
    fn exhausted_retries_fail_softly() {
        let spec = MockSpec {
            fail_first_attempts: 10,
            ..MockSpec::echo("ok")
        };
        let g = Gateway::from_config(&BackendConfig {
            max_retries: 2,
            ..fast(spec)
        })
        .unwrap();
        let r = g.complete("s", "u");
        assert!(r.failed);
        assert_eq!(r.attempts, 3);
        assert!(r.text.is_empty());
    }

    #[test]
    fn client_errors_are_not_retried() {
        let spec = MockSpec {
            fail_first_attempts: 10,
            failure_status: 400,
            ..MockSpec::echo("ok")
        };
        let g = Gateway::from_config(&fast(spec)).unwrap();
        let r = g.complete("s", "u");
        assert!(r.failed);
        assert_eq!(r.attempts, 1);
        let spec = MockSpec {
            fail_first_attempts: 1,
            failure_status: 429,
            ..MockSpec::echo("ok")
        };
        let g = Gateway::from_config(&fast(spec)).unwrap();
        assert_eq!(g.complete("s", "u").attempts, 2);
    }

    #[test]
    fn rules_match_by_task_and_pattern() {
        let spec = MockSpec {
            rules: vec![
                MockRule {
                    task: Some("binary".into()),
                    pattern: "(?i)recipe".into(),
                    response: "No".into(),
                },
                MockRule {
                    task: None,
                    pattern: "sad".into(),
                    response: "Depression".into(),
                },
            ],
            ..MockSpec::echo("Yes")
        };
        let m = MockBackend::new(spec).unwrap();
        let req = |tag, user| ChatRequest {
            tag,
            system: "",
            user,
        };
        assert_eq!(m.respond(&req(Some("binary"), "a Recipe")), "No");
        assert_eq!(m.respond(&req(Some("disorder"), "a recipe")), "Yes");
        assert_eq!(m.respond(&req(Some("disorder"), "so sad")), "Depression");
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::http("x", "not a url").validate().is_err());
        assert!(BackendConfig::http("x", "ftp://h/v1").validate().is_err());
        assert!(
            BackendConfig::http("x", "http://localhost:8000/v1/chat/completions")
                .validate()
                .is_ok()
        );
        let zero = BackendConfig {
            timeout_ms: 0,
            ..BackendConfig::mock("m", MockSpec::default())
        };
        assert!(zero.validate().is_err());
        let rpm = BackendConfig {
            requests_per_minute: Some(0),
            ..BackendConfig::mock("m", MockSpec::default())
        };
        assert!(rpm.validate().is_err());
        let bad_re = MockSpec {
            rules: vec![MockRule {
                task: None,
                pattern: "(".into(),
                response: String::new(),
            }],
            ..MockSpec::default()
        };
        assert!(BackendConfig::mock("m", bad_re).validate().is_err());
        let dup = BackendsFile {
            backends: vec![
                BackendConfig::mock("a", MockSpec::default()),
                BackendConfig::mock("a", MockSpec::default()),
            ],
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn missing_api_key_env_fails_at_build() {
        let cfg = BackendConfig {
            api_key_env: Some("MINDLENS_TEST_UNSET_TOKEN_VAR".into()),
            ..BackendConfig::http("x", "http://localhost:1/v1/chat/completions")
        };
        assert!(matches!(
            Gateway::from_config(&cfg),
            Err(GatewayError::Config(_))
        ));
    }

    #[test]
    fn backoff_ceiling_doubles_then_caps() {
        let p = RetryPolicy {
            base_ms: 500,
            cap_ms: 30_000,
        };
        let ceilings: Vec<u64> = (0..8).map(|r| p.ceiling_ms(r)).collect();
        assert_eq!(ceilings, [500, 1000, 2000, 4000, 8000, 16000, 30000, 30000]);
        assert_eq!(p.ceiling_ms(200), 30_000);
        let mut rng = rng::seeded(0);
        assert!((0..100).all(|_| p.delay_ms(2, &mut rng) <= 2000));
    }

    #[test]
    fn batch_rejects_duplicate_ids() {
        let g = Gateway::from_config(&fast(MockSpec::echo("x"))).unwrap();
        let p = PromptItem {
            id: "a".into(),
            tag: None,
            system: String::new(),
            user: "u".into(),
        };
        assert!(matches!(
            g.complete_batch(&[p.clone(), p]),
            Err(GatewayError::DuplicateId(_))
        ));
    }

    #[test]
    fn makespan_model() {
        assert_eq!(simulate_makespan(&[10; 100], 1, None), 1000);
        assert_eq!(simulate_makespan(&[10; 100], 10, None), 100);
        assert_eq!(simulate_makespan(&[5, 5, 5], 3, Some(60)), 2005);
        assert_eq!(simulate_makespan(&[], 4, None), 0);
    }

    #[test]
    fn latency_statistics() {
        let v: Vec<u64> = (1..=20).collect();
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(median(&v), 10.5);
        assert_eq!(median(&[3]), 3.0);
    }
}
