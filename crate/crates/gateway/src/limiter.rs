use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Minimum spacing between accepted prompts in one session.
pub const PROMPT_INTERVAL_MS: u64 = 150;

/// Monotonic millisecond time source.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

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
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

/// Hand-driven clock for tests and scripted replays.
#[derive(Clone, Default)]
pub struct ManualClock {
    now: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn set(&self, ms: u64) {
        self.now.fetch_max(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

/// First-wins limiter: a prompt is accepted only if the previous accepted
/// one is at least `interval_ms` old. Rejected prompts do not reset the
/// window.
#[derive(Debug, Clone, Copy)]
pub struct RateLimiter {
    interval_ms: u64,
    last_accepted: Option<u64>,
}

impl Default for RateLimiter {
    fn default() -> Self {
        Self::new(PROMPT_INTERVAL_MS)
    }
}

impl RateLimiter {
    pub fn new(interval_ms: u64) -> Self {
        Self {
            interval_ms,
            last_accepted: None,
        }
    }

    /// `Err(retry_after_ms)` when the prompt falls inside the window.
    pub fn admit(&mut self, now_ms: u64) -> Result<(), u64> {
        if let Some(last) = self.last_accepted {
            let elapsed = now_ms.saturating_sub(last);
            if elapsed < self.interval_ms {
                return Err(self.interval_ms - elapsed);
            }
        }
        self.last_accepted = Some(now_ms.max(self.last_accepted.unwrap_or(0)));
        Ok(())
    }

    pub fn last_accepted(&self) -> Option<u64> {
        self.last_accepted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_prompt_waits_out_the_window() {
        let mut rl = RateLimiter::default();
        assert_eq!(rl.admit(1000), Ok(()));
        assert_eq!(rl.admit(1050), Err(100));
        assert_eq!(rl.admit(1149), Err(1));
        assert_eq!(rl.admit(1150), Ok(()));
        assert_eq!(rl.last_accepted(), Some(1150));
    }

    #[test]
    fn manual_clock_never_runs_backwards() {
        let c = ManualClock::default();
        c.set(40);
        c.set(10);
        assert_eq!(c.now_ms(), 40);
        c.advance(5);
        assert_eq!(c.now_ms(), 45);
    }
}
