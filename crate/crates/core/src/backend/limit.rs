use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Time source for rate limiting and backoff.
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
    fn sleep_until(&self, t: Duration) {
        let now = self.now();
        if t > now {
            self.sleep(t - now);
        }
    }
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock that only moves when someone sleeps on it. Sleeping returns
/// immediately after advancing the shared time.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }

    fn sleep_until(&self, t: Duration) {
        let mut now = self.now.lock().unwrap();
        if t > *now {
            *now = t;
        }
    }
}

const WINDOW: Duration = Duration::from_secs(60);

/// Sliding-window limiter: at most `per_minute` grants in any 60 s window.
#[derive(Debug)]
pub struct RateLimiter {
    per_minute: usize,
    state: Mutex<LimiterState>,
}

#[derive(Debug, Default)]
struct LimiterState {
    recent: VecDeque<Duration>,
    history: Option<Vec<Duration>>,
}

impl RateLimiter {
    pub fn new(per_minute: usize) -> Self {
        Self {
            per_minute: per_minute.max(1),
            state: Mutex::new(LimiterState::default()),
        }
    }

    /// Also keeps every grant time, for audits.
    pub fn with_history(per_minute: usize) -> Self {
        let limiter = Self::new(per_minute);
        limiter.state.lock().unwrap().history = Some(Vec::new());
        limiter
    }

    /// Blocks (on `clock`) until a request may be issued and records it.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        loop {
            let wait_until = {
                let mut st = self.state.lock().unwrap();
                let now = clock.now();
                while st.recent.front().is_some_and(|&t| t + WINDOW <= now) {
                    st.recent.pop_front();
                }
                if st.recent.len() < self.per_minute {
                    st.recent.push_back(now);
                    if let Some(h) = st.history.as_mut() {
                        h.push(now);
                    }
                    return now;
                }
                *st.recent.front().expect("window is full") + WINDOW
            };
            clock.sleep_until(wait_until);
        }
    }

    pub fn history(&self) -> Vec<Duration> {
        self.state
            .lock()
            .unwrap()
            .history
            .clone()
            .unwrap_or_default()
    }
}

/// Counting semaphore bounding concurrent outstanding requests.
#[derive(Debug)]
pub struct InFlight {
    max: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

pub struct InFlightGuard<'a> {
    owner: &'a InFlight,
}

impl InFlight {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut st = self.state.lock().unwrap();
        while st.0 >= self.max {
            st = self.freed.wait(st).unwrap();
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        InFlightGuard { owner: self }
    }

    /// Highest number of simultaneously held permits so far.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.owner.state.lock().unwrap();
        st.0 -= 1;
        self.owner.freed.notify_one();
    }
}
