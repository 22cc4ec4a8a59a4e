use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Token bucket admitting `rpm` requests per minute with a burst of `rpm`.
/// Callers over the limit block until a token refills.
#[derive(Debug)]
pub struct RateLimiter {
    rpm: u32,
    state: Mutex<Bucket>,
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

impl RateLimiter {
    /// `rpm = 0` disables limiting.
    pub fn new(rpm: u32) -> Self {
        RateLimiter {
            rpm,
            state: Mutex::new(Bucket {
                tokens: f64::from(rpm),
                last: Instant::now(),
            }),
        }
    }

    fn per_second(&self) -> f64 {
        f64::from(self.rpm) / 60.0
    }

    /// Takes one token if available; otherwise returns how long to wait.
    pub fn try_acquire(&self) -> Result<(), Duration> {
        if self.rpm == 0 {
            return Ok(());
        }
        let mut b = self.state.lock().unwrap();
        let now = Instant::now();
        let refill = now.duration_since(b.last).as_secs_f64() * self.per_second();
        b.tokens = (b.tokens + refill).min(f64::from(self.rpm));
        b.last = now;
        if b.tokens >= 1.0 {
            b.tokens -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - b.tokens) / self.per_second()))
        }
    }

    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire() {
            std::thread::sleep(wait);
        }
    }
}
