//! Deterministic mock endpoint plus fault-injection wrappers for tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{ChatEndpoint, ChatRequest, EndpointError};

/// Generation returned for any key missing from the script: a fixed wrong
/// answer.
pub const UNSCRIPTED_ANSWER: &str = "Z";

/// Scripted endpoint: maps `(query_id, rollout_index)` to a generation and
/// answers `Z` for everything else. Requests are recorded for assertions.
pub struct MockEndpoint {
    script: HashMap<(String, usize), String>,
    recorded: Mutex<Vec<ChatRequest>>,
}

impl MockEndpoint {
    pub fn new(script: HashMap<(String, usize), String>) -> Self {
        MockEndpoint { script, recorded: Mutex::new(Vec::new()) }
    }

    pub fn empty() -> Self {
        Self::new(HashMap::new())
    }

    pub fn recorded_requests(&self) -> Vec<ChatRequest> {
        self.recorded.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.recorded.lock().unwrap().len()
    }
}

/// Build a scripted responder usable wherever an endpoint is expected.
pub fn mock_endpoint(script: HashMap<(String, usize), String>) -> Arc<MockEndpoint> {
    Arc::new(MockEndpoint::new(script))
}

impl ChatEndpoint for MockEndpoint {
    fn model_name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, EndpointError> {
        self.recorded.lock().unwrap().push(req.clone());
        Ok((0..req.n)
            .map(|k| {
                let key = (req.query_id.clone(), req.rollout_index + k);
                self.script
                    .get(&key)
                    .cloned()
                    .unwrap_or_else(|| UNSCRIPTED_ANSWER.to_string())
            })
            .collect())
    }
}

/// Endpoint that always fails with a retryable transport error. Counts
/// attempts so retry contracts can be asserted.
pub struct FailingEndpoint {
    attempts: AtomicUsize,
}

impl FailingEndpoint {
    pub fn new() -> Self {
        FailingEndpoint { attempts: AtomicUsize::new(0) }
    }

    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl Default for FailingEndpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatEndpoint for FailingEndpoint {
    fn model_name(&self) -> &str {
        "failing"
    }

    fn complete(&self, _req: &ChatRequest) -> Result<Vec<String>, EndpointError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(EndpointError::Transport("connection refused".into()))
    }
}

/// Wrapper that lets the first `budget` calls through and fails afterwards.
/// Used to simulate a mid-run crash for journal-resume tests.
pub struct FlakyEndpoint<E> {
    inner: Arc<E>,
    budget: AtomicUsize,
}

impl<E: ChatEndpoint> FlakyEndpoint<E> {
    pub fn new(inner: Arc<E>, budget: usize) -> Self {
        FlakyEndpoint { inner, budget: AtomicUsize::new(budget) }
    }
}

impl<E: ChatEndpoint> ChatEndpoint for FlakyEndpoint<E> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, EndpointError> {
        let remaining = self
            .budget
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1));
        match remaining {
            Ok(_) => self.inner.complete(req),
            Err(_) => Err(EndpointError::Transport("simulated outage".into())),
        }
    }
}
