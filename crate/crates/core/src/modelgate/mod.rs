//! Endpoint abstraction for chat-style model calls and rollout orchestration
//! with bounded concurrency, rate limiting, retries, and a resumable journal.
//!
//! The orchestrator exposes a blocking batch API. Requests carry the
//! benchmark-native question and options as a single user message with no
//! extra system prompt or modality hint; visual-only rollout specs mask audio
//! media out of the request.

mod clock;
mod http;
mod journal;
mod mock;

pub use clock::{Clock, MockClock, SystemClock};
pub use http::HttpEndpoint;
pub use journal::{replay as replay_journal, JournalWriter};
pub use mock::{mock_endpoint, FailingEndpoint, FlakyEndpoint, MockEndpoint, UNSCRIPTED_ANSWER};

use std::collections::{BTreeMap, VecDeque};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{MediaKind, Query};
use crate::verifier::{self, VerifierOutcome};

/// Probe-protocol defaults: 16 rollouts, temperature 1.0, 8192 max new
/// tokens.
pub const DEFAULT_N_ROLLOUTS: usize = 16;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 8192;

const BACKOFF_BASE_S: f64 = 0.25;
const BACKOFF_CAP_S: f64 = 8.0;

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("request timed out after {0}s")]
    Timeout(f64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {msg}")]
    Status { status: u16, msg: String },
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("endpoint config: {0}")]
    Config(String),
}

impl EndpointError {
    pub fn retryable(&self) -> bool {
        match self {
            EndpointError::Timeout(_) | EndpointError::Transport(_) => true,
            EndpointError::Status { status, .. } => *status == 429 || *status >= 500,
            EndpointError::BadResponse(_) => true,
            EndpointError::Config(_) => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GateError {
    #[error("endpoint failed for {query_id}#{rollout_index} after {attempts} attempts: {source}")]
    Endpoint {
        query_id: String,
        rollout_index: usize,
        attempts: u32,
        #[source]
        source: EndpointError,
    },
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("invalid rollout spec: {0}")]
    InvalidSpec(String),
    #[error("journal error: {0}")]
    Journal(String),
    #[error("incomplete run: missing {0} records")]
    Incomplete(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. The key itself
    /// is never logged or serialized.
    pub api_key_env: String,
    pub max_concurrency: usize,
    pub rate_limit_rps: f64,
    pub retry_max: u32,
    pub timeout_s: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: String::new(),
            model_name: String::new(),
            api_key_env: String::new(),
            max_concurrency: 4,
            rate_limit_rps: 64.0,
            retry_max: 2,
            timeout_s: 120.0,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        if self.max_concurrency < 1 {
            return Err(GateError::InvalidConfig("max_concurrency must be >= 1".into()));
        }
        if self.retry_max > 8 {
            return Err(GateError::InvalidConfig(format!(
                "retry_max must be <= 8, got {}",
                self.retry_max
            )));
        }
        if !self.rate_limit_rps.is_finite() || self.rate_limit_rps <= 0.0 {
            return Err(GateError::InvalidConfig(format!(
                "rate_limit_rps must be positive, got {}",
                self.rate_limit_rps
            )));
        }
        if !self.timeout_s.is_finite() || self.timeout_s <= 0.0 {
            return Err(GateError::InvalidConfig(format!(
                "timeout_s must be positive, got {}",
                self.timeout_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMask {
    Full,
    /// Keep image/video and the text question, withhold audio.
    VisualOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSpec {
    pub n_rollouts: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub modality_mask: ModalityMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RolloutSpec {
    fn default() -> Self {
        RolloutSpec {
            n_rollouts: DEFAULT_N_ROLLOUTS,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            modality_mask: ModalityMask::Full,
            seed: None,
        }
    }
}

impl RolloutSpec {
    /// Probe-protocol spec with audio withheld.
    pub fn visual_only() -> Self {
        RolloutSpec { modality_mask: ModalityMask::VisualOnly, ..Default::default() }
    }

    /// Single greedy sample, used for score evaluations.
    pub fn single_greedy() -> Self {
        RolloutSpec { n_rollouts: 1, temperature: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), GateError> {
        if self.n_rollouts < 1 {
            return Err(GateError::InvalidSpec("n_rollouts must be >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GateError::InvalidSpec(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens < 1 {
            return Err(GateError::InvalidSpec("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sampled generation for a query, already verified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub query_id: String,
    pub rollout_index: usize,
    pub generation: String,
    pub outcome: VerifierOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UrlRef {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: UrlRef },
    VideoUrl { video_url: UrlRef },
    AudioUrl { audio_url: UrlRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

/// One endpoint call. `n` generations are requested; per-rollout mode always
/// uses `n = 1`, grouped mode asks for the whole batch in one call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub query_id: String,
    pub rollout_index: usize,
    pub n: usize,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: Option<u64>,
}

pub trait ChatEndpoint: Send + Sync {
    fn model_name(&self) -> &str;
    /// Return exactly `req.n` generations.
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, EndpointError>;
    /// Whether wall-clock latency should be recorded for this endpoint.
    /// Mocks keep it off so outputs stay byte-identical across runs.
    fn records_latency(&self) -> bool {
        false
    }
}

/// Whether the rollouts of one query come from a single `n = k` request or
/// from `k` independent requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMode {
    PerRollout,
    Grouped,
}

/// Run metadata recorded in the journal and in view provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: String,
    pub request_mode: RequestMode,
    pub n_rollouts: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub modality_mask: ModalityMask,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RolloutRecord>,
    pub meta: RunMeta,
}

/// Render the benchmark-native prompt text: the question followed by the
/// lettered options, nothing else.
pub fn render_prompt(query: &Query) -> String {
    let mut text = query.question.clone();
    if let Some(options) = &query.options {
        for (i, option) in options.iter().enumerate() {
            text.push('\n');
            match verifier::index_letter(i) {
                Some(letter) => {
                    text.push(letter);
                    text.push_str(". ");
                }
                None => text.push_str(&format!("{}. ", i + 1)),
            }
            text.push_str(option);
        }
    }
    text
}

/// Build the single-user-message request for one query.
pub fn build_request(
    query: &Query,
    spec: &RolloutSpec,
    rollout_index: usize,
    n: usize,
) -> ChatRequest {
    let mut content = Vec::new();
    for media in &query.media {
        let part = match media.kind {
            MediaKind::Image => ContentPart::ImageUrl {
                image_url: UrlRef { url: media.uri.clone() },
            },
            MediaKind::Video => ContentPart::VideoUrl {
                video_url: UrlRef { url: media.uri.clone() },
            },
            MediaKind::Audio => {
                if spec.modality_mask == ModalityMask::VisualOnly {
                    continue;
                }
                ContentPart::AudioUrl { audio_url: UrlRef { url: media.uri.clone() } }
            }
        };
        content.push(part);
    }
    content.push(ContentPart::Text { text: render_prompt(query) });
    let seed = match n {
        1 => spec.seed.map(|s| s.wrapping_add(rollout_index as u64)),
        _ => spec.seed,
    };
    ChatRequest {
        query_id: query.query_id.clone(),
        rollout_index,
        n,
        messages: vec![ChatMessage { role: "user".into(), content }],
        temperature: spec.temperature,
        max_tokens: spec.max_new_tokens,
        seed,
    }
}

/// Reserves request start slots so the sustained rate never exceeds the
/// configured requests per second.
struct RateLimiter {
    min_interval: Duration,
    next_free: Mutex<Duration>,
}

impl RateLimiter {
    fn new(rps: f64) -> Self {
        RateLimiter {
            min_interval: Duration::from_secs_f64(1.0 / rps),
            next_free: Mutex::new(Duration::ZERO),
        }
    }

    fn acquire(&self, clock: &dyn Clock) {
        let wait = {
            let mut next = self.next_free.lock().unwrap();
            let now = clock.now();
            let slot = (*next).max(now);
            *next = slot + self.min_interval;
            slot.saturating_sub(now)
        };
        if !wait.is_zero() {
            clock.sleep(wait);
        }
    }
}

struct Task {
    query_idx: usize,
    rollout_index: usize,
    n: usize,
}

pub struct Orchestrator {
    endpoint: Arc<dyn ChatEndpoint>,
    config: EndpointConfig,
    clock: Arc<dyn Clock>,
    request_mode: RequestMode,
    backoff_seed: u64,
}

impl Orchestrator {
    pub fn new(endpoint: Arc<dyn ChatEndpoint>, config: EndpointConfig) -> Result<Self, GateError> {
        config.validate()?;
        Ok(Orchestrator {
            endpoint,
            config,
            clock: Arc::new(SystemClock::new()),
            request_mode: RequestMode::PerRollout,
            backoff_seed: 0,
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_request_mode(mut self, mode: RequestMode) -> Self {
        self.request_mode = mode;
        self
    }

    pub fn with_backoff_seed(mut self, seed: u64) -> Self {
        self.backoff_seed = seed;
        self
    }

    pub fn model_name(&self) -> &str {
        self.endpoint.model_name()
    }

    fn run_meta(&self, spec: &RolloutSpec) -> RunMeta {
        RunMeta {
            model: self.endpoint.model_name().to_string(),
            request_mode: self.request_mode,
            n_rollouts: spec.n_rollouts,
            temperature: spec.temperature,
            max_new_tokens: spec.max_new_tokens,
            modality_mask: spec.modality_mask,
        }
    }

    /// Run `spec.n_rollouts` rollouts per query, verify every generation, and
    /// return the records sorted by `(query_id, rollout_index)` regardless of
    /// completion order.
    ///
    /// With a journal path, completed records are appended as they finish and
    /// replayed on the next call, so an aborted run resumes where it stopped
    /// and produces the same final record set as an uninterrupted one.
    pub fn run_rollouts(
        &self,
        queries: &[Query],
        spec: &RolloutSpec,
        journal_path: Option<&Path>,
    ) -> Result<RunOutput, GateError> {
        spec.validate()?;
        let meta = self.run_meta(spec);

        let mut done: BTreeMap<(String, usize), RolloutRecord> = BTreeMap::new();
        if let Some(path) = journal_path {
            let (existing_meta, records) = journal::replay(path)?;
            if let Some(existing) = existing_meta {
                if existing != meta {
                    return Err(GateError::Journal(format!(
                        "journal {} was written by a different run configuration",
                        path.display()
                    )));
                }
            }
            for record in records {
                done.insert((record.query_id.clone(), record.rollout_index), record);
            }
        }

        let mut tasks = VecDeque::new();
        for (query_idx, query) in queries.iter().enumerate() {
            let missing: Vec<usize> = (0..spec.n_rollouts)
                .filter(|i| !done.contains_key(&(query.query_id.clone(), *i)))
                .collect();
            if missing.is_empty() {
                continue;
            }
            match self.request_mode {
                RequestMode::PerRollout => {
                    for idx in missing {
                        tasks.push_back(Task { query_idx, rollout_index: idx, n: 1 });
                    }
                }
                RequestMode::Grouped => {
                    tasks.push_back(Task { query_idx, rollout_index: 0, n: spec.n_rollouts });
                }
            }
        }

        let journal = match journal_path {
            Some(path) => Some(Mutex::new(JournalWriter::open(path, &meta)?)),
            None => None,
        };
        let limiter = RateLimiter::new(self.config.rate_limit_rps);
        let n_tasks = tasks.len();
        let queue = Mutex::new(tasks);
        let fresh: Mutex<Vec<RolloutRecord>> = Mutex::new(Vec::new());
        let first_error: Mutex<Option<GateError>> = Mutex::new(None);
        let abort = AtomicBool::new(false);

        let n_workers = self.config.max_concurrency.min(n_tasks).max(1);
        std::thread::scope(|scope| {
            for _ in 0..n_workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let task = match queue.lock().unwrap().pop_front() {
                        Some(t) => t,
                        None => break,
                    };
                    let query = &queries[task.query_idx];
                    match self.attempt_task(query, spec, &task, &limiter) {
                        Ok(records) => {
                            let mut out = fresh.lock().unwrap();
                            for record in records {
                                let key = (record.query_id.clone(), record.rollout_index);
                                if done.contains_key(&key) {
                                    continue;
                                }
                                if let Some(j) = &journal {
                                    if let Err(e) = j.lock().unwrap().append(&record) {
                                        let mut slot = first_error.lock().unwrap();
                                        if slot.is_none() {
                                            *slot = Some(e);
                                        }
                                        abort.store(true, Ordering::SeqCst);
                                        return;
                                    }
                                }
                                out.push(record);
                            }
                        }
                        Err(e) => {
                            let mut slot = first_error.lock().unwrap();
                            if slot.is_none() {
                                *slot = Some(e);
                            }
                            abort.store(true, Ordering::SeqCst);
                            break;
                        }
                    }
                });
            }
        });

        if let Some(err) = first_error.lock().unwrap().take() {
            return Err(err);
        }

        let mut records: Vec<RolloutRecord> = done.into_values().collect();
        records.extend(fresh.into_inner().unwrap());
        records.sort_by(|a, b| {
            (a.query_id.as_str(), a.rollout_index).cmp(&(b.query_id.as_str(), b.rollout_index))
        });
        records.dedup_by(|a, b| a.query_id == b.query_id && a.rollout_index == b.rollout_index);

        let expected = queries.len() * spec.n_rollouts;
        if records.len() != expected {
            return Err(GateError::Incomplete(expected - records.len()));
        }
        Ok(RunOutput { records, meta })
    }

    fn attempt_task(
        &self,
        query: &Query,
        spec: &RolloutSpec,
        task: &Task,
        limiter: &RateLimiter,
    ) -> Result<Vec<RolloutRecord>, GateError> {
        let request = build_request(query, spec, task.rollout_index, task.n);
        let mut rng = self.task_rng(&query.query_id, task.rollout_index);
        let mut attempt = 0u32;
        loop {
            limiter.acquire(self.clock.as_ref());
            let started = self.clock.now();
            match self.endpoint.complete(&request) {
                Ok(generations) => {
                    if generations.len() != task.n {
                        return Err(GateError::Endpoint {
                            query_id: query.query_id.clone(),
                            rollout_index: task.rollout_index,
                            attempts: attempt + 1,
                            source: EndpointError::BadResponse(format!(
                                "expected {} generations, got {}",
                                task.n,
                                generations.len()
                            )),
                        });
                    }
                    let latency_ms = self
                        .endpoint
                        .records_latency()
                        .then(|| (self.clock.now() - started).as_secs_f64() * 1000.0);
                    return Ok(generations
                        .into_iter()
                        .enumerate()
                        .map(|(k, generation)| RolloutRecord {
                            query_id: query.query_id.clone(),
                            rollout_index: task.rollout_index + k,
                            outcome: verifier::verify(&generation, query),
                            generation,
                            latency_ms,
                        })
                        .collect());
                }
                Err(e) => {
                    attempt += 1;
                    if !e.retryable() || attempt > self.config.retry_max {
                        return Err(GateError::Endpoint {
                            query_id: query.query_id.clone(),
                            rollout_index: task.rollout_index,
                            attempts: attempt,
                            source: e,
                        });
                    }
                    // Capped exponential backoff with full jitter; the seeded
                    // generator keeps test runs deterministic.
                    let cap = BACKOFF_CAP_S.min(BACKOFF_BASE_S * 2f64.powi(attempt as i32 - 1));
                    let delay = rng.random_range(0.0..=cap);
                    self.clock.sleep(Duration::from_secs_f64(delay));
                }
            }
        }
    }

    fn task_rng(&self, query_id: &str, rollout_index: usize) -> ChaCha8Rng {
        let mut hasher = DefaultHasher::new();
        query_id.hash(&mut hasher);
        rollout_index.hash(&mut hasher);
        ChaCha8Rng::seed_from_u64(self.backoff_seed ^ hasher.finish())
    }
}

/// Batch-call convenience: rollouts for a query list against one endpoint,
/// no journal.
pub fn run_rollouts(
    queries: &[Query],
    spec: &RolloutSpec,
    endpoint: Arc<dyn ChatEndpoint>,
    config: &EndpointConfig,
) -> Result<Vec<RolloutRecord>, GateError> {
    let orch = Orchestrator::new(endpoint, config.clone())?;
    Ok(orch.run_rollouts(queries, spec, None)?.records)
}
