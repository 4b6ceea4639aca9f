//! Text-generation client abstraction shared by the counterfactual
//! generator and the in-context prompting pipeline.
//!
//! The default execution mode is offline: a [`ReplayClient`] serves recorded
//! completions keyed by prompt hash, and a [`RecordingClient`] produces such
//! fixtures from any inner client. Nothing in this crate performs network
//! I/O; HTTP backends implement [`GenerationClient`] downstream.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Alternatives considered at one output position: `(token, logprob)`,
/// best first. A single-entry list degrades to plain chosen-token logprobs.
pub type TokenAlternatives = Vec<(String, f64)>;

/// One completion. `token_logprobs`, when present, holds per-position
/// alternative lists for the generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenAlternatives>>,
}

impl Completion {
    pub fn text_only(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            token_logprobs: None,
        }
    }
}

/// Request parameters, mirroring a completions-style API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Number of per-token alternatives to request.
    pub n_logprobs: usize,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens: 256,
            temperature: 0.0,
            top_p: 1.0,
            n_logprobs: 10,
        }
    }
}

/// Typed failure surface; rate limits and timeouts must arrive as errors,
/// never as empty text.
#[derive(Debug, Error)]
pub enum ClientError {
    #[error("rate limited")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no recorded completion for prompt hash {0}")]
    MissingFixture(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ClientError {
    /// Whether a retry may help.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ClientError::RateLimited | ClientError::Timeout | ClientError::Transport(_)
        )
    }
}

/// A blocking text-generation backend.
pub trait GenerationClient {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ClientError>;
    /// Identity recorded in provenance fields (model name, fixture file, ...).
    fn id(&self) -> String;
}

/// Retry budget with exponential backoff for retryable client errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: usize,
    pub initial_backoff_ms: u64,
    pub backoff_multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            initial_backoff_ms: 250,
            backoff_multiplier: 2.0,
            max_backoff_ms: 4_000,
        }
    }
}

impl RetryPolicy {
    /// No waiting; used by tests and replay runs.
    pub fn immediate(max_retries: usize) -> Self {
        RetryPolicy {
            max_retries,
            initial_backoff_ms: 0,
            backoff_multiplier: 1.0,
            max_backoff_ms: 0,
        }
    }

    pub fn backoff(&self, attempt: usize) -> Duration {
        let ms = (self.initial_backoff_ms as f64 * self.backoff_multiplier.powi(attempt as i32))
            .min(self.max_backoff_ms as f64);
        Duration::from_millis(ms as u64)
    }

    /// Runs `op` up to `1 + max_retries` times, sleeping between retryable
    /// failures; the last error is surfaced.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, ClientError>,
    ) -> Result<T, ClientError> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(value) => return Ok(value),
                Err(err) if err.is_retryable() && attempt < self.max_retries => {
                    let wait = self.backoff(attempt);
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

/// Stable 64-bit FNV-1a digest of a prompt, hex-encoded; the fixture key.
pub fn prompt_hash(prompt: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in prompt.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Scripted in-memory client for tests and smoke runs.
pub struct StubClient {
    id: String,
    #[allow(clippy::type_complexity)]
    handler: Box<dyn Fn(&CompletionRequest) -> Result<Completion, ClientError> + Send + Sync>,
}

impl StubClient {
    pub fn new(
        id: impl Into<String>,
        handler: impl Fn(&CompletionRequest) -> Result<Completion, ClientError>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        StubClient {
            id: id.into(),
            handler: Box::new(handler),
        }
    }

    /// Always returns the same text.
    pub fn constant(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        StubClient::new(id, move |_| Ok(Completion::text_only(text.clone())))
    }
}

impl GenerationClient for StubClient {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ClientError> {
        (self.handler)(request)
    }
    fn id(&self) -> String {
        self.id.clone()
    }
}

/// One recorded exchange: `{prompt_hash, completion, token_logprobs}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub prompt_hash: String,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenAlternatives>>,
}

/// Serves recorded completions; unknown prompts are a typed error.
pub struct ReplayClient {
    id: String,
    records: HashMap<String, FixtureRecord>,
}

impl ReplayClient {
    pub fn from_records(id: impl Into<String>, records: Vec<FixtureRecord>) -> Self {
        ReplayClient {
            id: id.into(),
            records: records
                .into_iter()
                .map(|r| (r.prompt_hash.clone(), r))
                .collect(),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord = serde_json::from_str(&line)
                .map_err(|e| ClientError::MalformedResponse(format!("fixture: {e}")))?;
            records.push(record);
        }
        Ok(ReplayClient::from_records(
            format!("replay:{}", path.display()),
            records,
        ))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl GenerationClient for ReplayClient {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ClientError> {
        let hash = prompt_hash(&request.prompt);
        let record = self
            .records
            .get(&hash)
            .ok_or(ClientError::MissingFixture(hash))?;
        Ok(Completion {
            text: record.completion.clone(),
            token_logprobs: record.token_logprobs.clone(),
        })
    }
    fn id(&self) -> String {
        self.id.clone()
    }
}

/// Wraps a client and records every successful exchange as fixtures.
pub struct RecordingClient<C> {
    inner: C,
    records: RefCell<Vec<FixtureRecord>>,
}

impl<C: GenerationClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        RecordingClient {
            inner,
            records: RefCell::new(Vec::new()),
        }
    }

    pub fn into_records(self) -> Vec<FixtureRecord> {
        self.records.into_inner()
    }

    pub fn write_fixtures(&self, path: impl AsRef<Path>) -> Result<(), ClientError> {
        let mut writer = BufWriter::new(File::create(path.as_ref())?);
        for record in self.records.borrow().iter() {
            let json = serde_json::to_string(record)
                .map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
            writer.write_all(json.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }
}

impl<C: GenerationClient> GenerationClient for RecordingClient<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ClientError> {
        let completion = self.inner.complete(request)?;
        self.records.borrow_mut().push(FixtureRecord {
            prompt_hash: prompt_hash(&request.prompt),
            completion: completion.text.clone(),
            token_logprobs: completion.token_logprobs.clone(),
        });
        Ok(completion)
    }
    fn id(&self) -> String {
        self.inner.id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_surfaces_error_after_budget() {
        let mut calls = 0;
        let policy = RetryPolicy::immediate(2);
        let result: Result<(), _> = policy.run(|| {
            calls += 1;
            Err(ClientError::Timeout)
        });
        assert!(matches!(result, Err(ClientError::Timeout)));
        assert_eq!(calls, 3); // initial attempt plus two retries
    }

    #[test]
    fn retry_stops_on_non_retryable() {
        let mut calls = 0;
        let policy = RetryPolicy::immediate(5);
        let result: Result<(), _> = policy.run(|| {
            calls += 1;
            Err(ClientError::MalformedResponse("bad".into()))
        });
        assert!(result.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn replay_round_trips_through_recording() {
        let stub = StubClient::constant("stub", "Revised Document: rewritten text.");
        let recorder = RecordingClient::new(stub);
        let request = CompletionRequest::new("some prompt");
        let original = recorder.complete(&request).unwrap();

        let replay = ReplayClient::from_records("replay", recorder.into_records());
        assert_eq!(replay.complete(&request).unwrap(), original);
        assert!(matches!(
            replay.complete(&CompletionRequest::new("unseen prompt")),
            Err(ClientError::MissingFixture(_))
        ));
    }

    #[test]
    fn prompt_hash_is_stable() {
        assert_eq!(prompt_hash("abc"), prompt_hash("abc"));
        assert_ne!(prompt_hash("abc"), prompt_hash("abd"));
        assert_eq!(prompt_hash("abc").len(), 16);
    }

    #[test]
    fn fixture_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.jsonl");
        let stub = StubClient::new("stub", |req| {
            Ok(Completion {
                text: format!("echo: {}", req.prompt),
                token_logprobs: Some(vec![vec![("echo".into(), -0.1)]]),
            })
        });
        let recorder = RecordingClient::new(stub);
        let request = CompletionRequest::new("p1");
        let first = recorder.complete(&request).unwrap();
        recorder.write_fixtures(&path).unwrap();

        let replay = ReplayClient::from_path(&path).unwrap();
        assert_eq!(replay.len(), 1);
        assert_eq!(replay.complete(&request).unwrap(), first);
    }
}
