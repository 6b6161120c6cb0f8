//! Sortable request ids.

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulid::Ulid;

use crate::clock::Clock;

/// ULIDs whose time part follows the shared clock and whose random part comes
/// from a seeded stream, so virtual runs produce the same ids.
pub struct IdGen {
    clock: Clock,
    rng: Mutex<ChaCha8Rng>,
}

impl IdGen {
    pub fn new(clock: Clock, seed: u64) -> Self {
        Self { clock, rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn next(&self) -> Ulid {
        let ms = (self.clock.unix_now() * 1000.0) as u64;
        let mut rng = self.rng.lock();
        let random = (u128::from(rng.next_u64()) << 64 | u128::from(rng.next_u64())) & ((1u128 << 80) - 1);
        Ulid::from_parts(ms, random)
    }

    pub fn prefixed(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.next().to_string().to_lowercase())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ClockMode;
    use std::time::Duration;

    #[tokio::test(start_paused = true)]
    async fn ids_sort_by_time_and_repeat_per_seed() {
        let a = IdGen::new(Clock::start(ClockMode::Virtual, 1.7e9), 7);
        let first = a.next();
        tokio::time::sleep(Duration::from_millis(5)).await;
        let second = a.next();
        assert!(first < second);

        let b = IdGen::new(Clock::start(ClockMode::Virtual, 1.7e9), 7);
        assert_eq!(b.next().random(), first.random());
    }
}
