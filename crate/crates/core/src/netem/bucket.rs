use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Token bucket with continuous refill.
///
/// Tokens are bytes. [`take`](Self::take) always succeeds and may drive the
/// balance negative; the returned duration is how long the caller has to
/// wait for the debt to be repaid. The bucket starts empty and an idle
/// bucket does not fill up, so the first grant of a transfer is paced like
/// every later one. Credit of up to `burst` only builds while debt is
/// being repaid, which returns the time a caller overslept its wait.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<State>,
}

#[derive(Debug)]
struct State {
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    /// `rate` in bytes/s; `burst` bounds the credit kept from oversleeping.
    pub fn new(rate: f64, burst: f64) -> Self {
        assert!(rate > 0.0, "token bucket rate must be positive");
        Self {
            rate,
            burst: burst.max(0.0),
            state: Mutex::new(State {
                tokens: 0.0,
                last: Instant::now(),
            }),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn take(&self, n: u64) -> Duration {
        self.take_at(n, Instant::now())
    }

    pub(crate) fn take_at(&self, n: u64, now: Instant) -> Duration {
        let mut s = self.state.lock().unwrap();
        let elapsed = now.saturating_duration_since(s.last).as_secs_f64();
        s.last = s.last.max(now);
        let cap = if s.tokens < 0.0 {
            self.burst
        } else {
            s.tokens.min(self.burst)
        };
        s.tokens = (s.tokens + elapsed * self.rate).min(cap);
        s.tokens -= n as f64;
        if s.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-s.tokens / self.rate)
        }
    }
}
