//! Clock abstraction so rate limiting and backoff are testable with virtual
//! time.

use std::sync::Mutex;
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Monotonic time since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
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

/// Virtual clock: `sleep` advances time instantly and is counted, so tests
/// can assert on pacing without waiting.
pub struct MockClock {
    state: Mutex<MockState>,
}

struct MockState {
    now: Duration,
    sleeps: Vec<Duration>,
}

impl MockClock {
    pub fn new() -> Self {
        MockClock {
            state: Mutex::new(MockState { now: Duration::ZERO, sleeps: Vec::new() }),
        }
    }

    pub fn elapsed(&self) -> Duration {
        self.state.lock().unwrap().now
    }

    pub fn sleep_count(&self) -> usize {
        self.state.lock().unwrap().sleeps.len()
    }

    pub fn total_slept(&self) -> Duration {
        self.state.lock().unwrap().sleeps.iter().sum()
    }
}

impl Default for MockClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MockClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().now
    }

    fn sleep(&self, d: Duration) {
        let mut state = self.state.lock().unwrap();
        state.now += d;
        state.sleeps.push(d);
    }
}
