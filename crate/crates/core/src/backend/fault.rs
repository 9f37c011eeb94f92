//! Fault injection around any backend, for exercising retry, abstention and
//! concurrency limits without a network.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{Backend, BackendError, RawCompletion};
use crate::scheme::{RenderedPrompt, Stage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    Transient,
    RateLimited,
    Auth,
    Malformed,
    /// Succeeds with this text instead of the wrapped backend's output.
    Reply(String),
}

impl Fault {
    /// Output with no structured block, which the parser rejects.
    pub fn garbage() -> Self {
        Fault::Reply("I am not sure, it could be several things.".into())
    }
}

pub struct FaultyBackend {
    inner: Arc<dyn Backend>,
    scripts: Mutex<HashMap<(String, Stage), VecDeque<Fault>>>,
    hold: Duration,
    calls: AtomicUsize,
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl FaultyBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            scripts: Mutex::new(HashMap::new()),
            hold: Duration::ZERO,
            calls: AtomicUsize::new(0),
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    /// Keeps every request outstanding for `hold` of real time, so that
    /// concurrent callers overlap.
    pub fn with_hold(mut self, hold: Duration) -> Self {
        self.hold = hold;
        self
    }

    /// Queues faults for the next calls on `(utterance_id, stage)`; once the
    /// queue is empty calls pass through.
    pub fn script(&self, utterance_id: &str, stage: Stage, faults: Vec<Fault>) {
        self.scripts
            .lock()
            .unwrap()
            .entry((utterance_id.to_string(), stage))
            .or_default()
            .extend(faults);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Most requests observed outstanding at once.
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Backend for FaultyBackend {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn complete_once(&self, prompt: &RenderedPrompt) -> Result<RawCompletion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.hold.is_zero() {
            std::thread::sleep(self.hold);
        }
        let fault = self
            .scripts
            .lock()
            .unwrap()
            .get_mut(&(prompt.target_utterance_id.clone(), prompt.stage))
            .and_then(VecDeque::pop_front);
        let result = match fault {
            None => self.inner.complete_once(prompt),
            Some(Fault::Transient) => Err(BackendError::Transient("injected timeout".into())),
            Some(Fault::RateLimited) => Err(BackendError::RateLimited),
            Some(Fault::Auth) => Err(BackendError::AuthFailure("injected 401".into())),
            Some(Fault::Malformed) => {
                Err(BackendError::MalformedProviderResponse("injected".into()))
            }
            Some(Fault::Reply(text)) => self.inner.complete_once(prompt).map(|mut raw| {
                raw.text = text;
                raw
            }),
        };
        self.current.fetch_sub(1, Ordering::SeqCst);
        result
    }
}
