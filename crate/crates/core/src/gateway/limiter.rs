use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightPermit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut active = self.active.lock().expect("limiter poisoned");
        while *active >= self.max {
            active = self.freed.wait(active).expect("limiter poisoned");
        }
        *active += 1;
        InFlightPermit { limiter: self }
    }

    pub fn active(&self) -> usize {
        *self.active.lock().expect("limiter poisoned")
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().expect("limiter poisoned");
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Token bucket shared by all request threads.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64) -> Self {
        let capacity = rate_per_sec.max(1.0);
        Self {
            rate: rate_per_sec,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until one token is available and takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("bucket poisoned");
                let now = Instant::now();
                let (tokens, last) = *state;
                let tokens = (tokens + now.duration_since(last).as_secs_f64() * self.rate).min(self.capacity);
                if tokens >= 1.0 {
                    *state = (tokens - 1.0, now);
                    return;
                }
                *state = (tokens, now);
                (1.0 - tokens) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}
