//! Time sources used by everything that waits.
//!
//! Timed code takes a `&dyn Clock` so the same logic runs against wall time
//! or against the simulator's virtual clock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

/// A monotonic microsecond clock that can block until a deadline.
pub trait Clock: Send + Sync {
    fn now_us(&self) -> u64;

    /// Block until `now_us() >= deadline_us`. Returns immediately for past deadlines.
    fn sleep_until_us(&self, deadline_us: u64);
}

/// Wall clock measured from construction.
#[derive(Debug, Clone)]
pub struct SystemClock {
    epoch: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            epoch: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    fn sleep_until_us(&self, deadline_us: u64) {
        let now = self.now_us();
        if deadline_us > now {
            std::thread::sleep(Duration::from_micros(deadline_us - now));
        }
    }
}

/// Clock that only moves when told to. Sleeping jumps straight to the deadline.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at_us(us: u64) -> Self {
        Self {
            now: AtomicU64::new(us),
        }
    }

    pub fn advance_us(&self, dt: u64) {
        self.now.fetch_add(dt, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_us(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_until_us(&self, deadline_us: u64) {
        self.now.fetch_max(deadline_us, Ordering::SeqCst);
    }
}
