//! Model invocation boundary.
//!
//! A [`Backend`] performs one raw request. A [`Client`] wraps it with the
//! per-backend rate limiter, in-flight bound, retry policy and response cache,
//! and reports token usage for every completion.

mod cache;
pub mod fault;
pub mod http;
mod limit;
pub mod synthetic;

use std::fmt;
use std::ops::{Add, AddAssign};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::scheme::RenderedPrompt;

pub use cache::{cache_key, CachedResponse, DirCache, MemoryCache, ResponseCache};
pub use limit::{Clock, InFlight, InFlightGuard, RateLimiter, SystemClock, VirtualClock};
pub use synthetic::{ConfusionSpec, SyntheticAnnotatorConfig, SyntheticBackend};

/// Token counts for one call or an aggregate of calls.
///
/// `total_tokens` is always `prompt_tokens + completion_tokens`; the only ways
/// to build one go through [`UsageRecord::new`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawUsage")]
pub struct UsageRecord {
    prompt_tokens: u64,
    completion_tokens: u64,
    total_tokens: u64,
}

#[derive(Deserialize)]
struct RawUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
    total_tokens: u64,
}

impl TryFrom<RawUsage> for UsageRecord {
    type Error = String;

    fn try_from(raw: RawUsage) -> Result<Self, Self::Error> {
        let u = UsageRecord::new(raw.prompt_tokens, raw.completion_tokens);
        if u.total_tokens != raw.total_tokens {
            return Err(format!(
                "total_tokens {} != prompt {} + completion {}",
                raw.total_tokens, raw.prompt_tokens, raw.completion_tokens
            ));
        }
        Ok(u)
    }
}

impl UsageRecord {
    pub const ZERO: UsageRecord = UsageRecord {
        prompt_tokens: 0,
        completion_tokens: 0,
        total_tokens: 0,
    };

    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
        }
    }

    pub fn prompt_tokens(&self) -> u64 {
        self.prompt_tokens
    }

    pub fn completion_tokens(&self) -> u64 {
        self.completion_tokens
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }
}

impl Add for UsageRecord {
    type Output = UsageRecord;

    fn add(self, rhs: Self) -> Self {
        UsageRecord::new(
            self.prompt_tokens + rhs.prompt_tokens,
            self.completion_tokens + rhs.completion_tokens,
        )
    }
}

impl AddAssign for UsageRecord {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for UsageRecord {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(UsageRecord::ZERO, Add::add)
    }
}

/// Character-count token estimate, `ceil(chars / 4)`. Used only when a
/// provider omits usage, and always flagged as estimated.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gpt,
    Claude,
    Gemini,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub backend_id: String,
    pub family: Family,
    #[serde(default)]
    pub reasoning_enabled: bool,
    /// Provider URL, or `"synthetic"`.
    #[serde(default = "synthetic_endpoint")]
    pub endpoint: String,
    /// Provider model name; defaults to the backend id.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: usize,
    /// Completion budget sent to providers that require one.
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub synthetic: Option<SyntheticAnnotatorConfig>,
}

fn synthetic_endpoint() -> String {
    "synthetic".into()
}

fn default_in_flight() -> usize {
    4
}

fn default_rpm() -> usize {
    60
}

fn default_max_tokens() -> u32 {
    1024
}

impl BackendSpec {
    pub fn model_name(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.backend_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("rate limited by provider")]
    RateLimited,
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("malformed provider response: {0}")]
    MalformedProviderResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Timeouts, 429 and 5xx are retried; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transient(_) | BackendError::RateLimited)
    }
}

/// Provider output for a single request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCompletion {
    pub text: String,
    pub usage: Option<UsageRecord>,
}

/// One request against one model.
pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn complete_once(&self, prompt: &RenderedPrompt) -> Result<RawCompletion, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Additional attempts after the first.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, given `attempt` failures so far.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64
            .checked_shl(attempt.saturating_sub(1))
            .unwrap_or(u64::MAX);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

/// Result of [`Client::complete`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: UsageRecord,
    /// `usage` came from [`estimate_tokens`] rather than the provider.
    pub usage_estimated: bool,
    /// Requests issued for this completion (0 on a cache hit).
    pub attempts: u32,
    /// Errors of the failed attempts, in order.
    pub attempt_errors: Vec<String>,
    pub cached: bool,
}

/// Failure of [`Client::complete`], with the attempts that were made.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{error} (after {attempts} attempts)")]
pub struct CompletionFailure {
    pub error: BackendError,
    pub attempts: u32,
    pub attempt_errors: Vec<String>,
}

/// Shareable handle around a backend. `complete` may be called from many
/// threads; the limiter and the in-flight gate are the only shared state.
pub struct Client {
    backend: Arc<dyn Backend>,
    limiter: RateLimiter,
    in_flight: InFlight,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    cache: Option<Arc<dyn ResponseCache>>,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client")
            .field("backend", &self.backend.backend_id())
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Client {
    pub fn new(
        backend: Arc<dyn Backend>,
        max_in_flight: usize,
        requests_per_minute: usize,
    ) -> Self {
        Self {
            backend,
            limiter: RateLimiter::new(requests_per_minute),
            in_flight: InFlight::new(max_in_flight),
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::default()),
            cache: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_cache(mut self, cache: Arc<dyn ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Replaces the limiter, e.g. with one that keeps its grant history.
    pub fn with_limiter(mut self, limiter: RateLimiter) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    pub fn in_flight(&self) -> &InFlight {
        &self.in_flight
    }

    fn key_for(&self, prompt: &RenderedPrompt) -> String {
        cache_key(
            prompt.stage,
            &prompt.target_utterance_id,
            self.backend_id(),
            &prompt.hash(),
        )
    }

    /// Stores a completion for later [`Client::complete`] calls. Callers only
    /// remember responses they accepted, so a rejected output is never replayed.
    pub fn remember(&self, prompt: &RenderedPrompt, completion: &Completion) {
        if let Some(cache) = &self.cache {
            cache.put(
                &self.key_for(prompt),
                &CachedResponse {
                    text: completion.text.clone(),
                    usage: completion.usage,
                    usage_estimated: completion.usage_estimated,
                },
            );
        }
    }

    /// Serves from the cache when possible, otherwise issues a request.
    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, CompletionFailure> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&self.key_for(prompt)) {
                return Ok(Completion {
                    text: hit.text,
                    usage: hit.usage,
                    usage_estimated: hit.usage_estimated,
                    attempts: 0,
                    attempt_errors: Vec::new(),
                    cached: true,
                });
            }
        }
        self.complete_uncached(prompt)
    }

    /// Issues a request, retrying transient failures per the retry policy.
    pub fn complete_uncached(
        &self,
        prompt: &RenderedPrompt,
    ) -> Result<Completion, CompletionFailure> {
        let mut errors = Vec::new();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            self.limiter.acquire(self.clock.as_ref());
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.backend.complete_once(prompt)
            };
            match outcome {
                Ok(raw) => {
                    let (usage, usage_estimated) = match raw.usage {
                        Some(u) => (u, false),
                        None => (
                            UsageRecord::new(
                                estimate_tokens(&prompt.text),
                                estimate_tokens(&raw.text),
                            ),
                            true,
                        ),
                    };
                    return Ok(Completion {
                        text: raw.text,
                        usage,
                        usage_estimated,
                        attempts,
                        attempt_errors: errors,
                        cached: false,
                    });
                }
                Err(e) if e.is_retryable() && attempts <= self.retry.max_retries => {
                    log::debug!("{}: attempt {attempts} failed: {e}", self.backend_id());
                    errors.push(e.to_string());
                    self.clock.sleep(self.retry.backoff(attempts));
                }
                Err(e) => {
                    errors.push(e.to_string());
                    let error = if e.is_retryable() {
                        BackendError::ExhaustedRetries {
                            attempts,
                            last: e.to_string(),
                        }
                    } else {
                        e
                    };
                    return Err(CompletionFailure {
                        error,
                        attempts,
                        attempt_errors: errors,
                    });
                }
            }
        }
    }
}
