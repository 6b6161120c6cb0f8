//! Token bucket, one per principal.

use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BucketConfig {
    /// Burst size, in requests.
    pub capacity: f64,
    /// Requests per second added back.
    pub refill_per_sec: f64,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self { capacity: 100.0, refill_per_sec: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Pass,
    /// Rejected; a request may pass again after this long.
    Limited {
        retry_after: SimDuration,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    config: BucketConfig,
    level: f64,
    updated_at: SimTime,
}

impl TokenBucket {
    /// A full bucket.
    pub fn new(config: BucketConfig, now: SimTime) -> Self {
        Self { config, level: config.capacity, updated_at: now }
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    fn refill(&mut self, now: SimTime) {
        if now > self.updated_at {
            let elapsed = now.since(self.updated_at).as_secs_f64();
            self.level = (self.level + elapsed * self.config.refill_per_sec).min(self.config.capacity);
            self.updated_at = now;
        }
    }

    pub fn try_acquire(&mut self, now: SimTime) -> Decision {
        self.refill(now);
        // Absorb float noise so whole-second refills land on integers.
        if self.level + 1e-9 >= 1.0 {
            self.level = (self.level - 1.0).max(0.0);
            Decision::Pass
        } else if self.config.refill_per_sec > 0.0 {
            let wait = (1.0 - self.level) / self.config.refill_per_sec;
            Decision::Limited { retry_after: SimDuration::from_secs_f64(wait) }
        } else {
            Decision::Limited { retry_after: SimDuration(u64::MAX) }
        }
    }
}
