//! One time base for the whole process.
//!
//! Everything reads [`Clock::now`], which is time since the clock was created
//! on tokio's clock. Under a paused runtime (`start_paused`) that clock is
//! virtual and jumps straight to the next timer, so the same code runs both
//! deterministic simulations and real deployments. Timer resolution is 1 ms.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use fedinfer_core::{SimDuration, SimTime};
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Deterministic; requires a paused tokio runtime.
    #[default]
    Virtual,
    Wall,
}

#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin: Instant,
    origin_unix: f64,
}

impl Clock {
    /// Starts a clock at the current instant. In virtual mode the unix offset
    /// is pinned to `epoch` so runs are reproducible.
    pub fn start(mode: ClockMode, epoch: f64) -> Self {
        let origin_unix = match mode {
            ClockMode::Virtual => epoch,
            ClockMode::Wall => SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
        };
        Self { origin: Instant::now(), origin_unix }
    }

    pub fn now(&self) -> SimTime {
        SimTime(self.origin.elapsed().as_micros() as u64)
    }

    pub fn unix_now(&self) -> f64 {
        self.to_unix(self.now())
    }

    pub fn to_unix(&self, t: SimTime) -> f64 {
        self.origin_unix + t.as_secs_f64()
    }

    /// Unix seconds to clock time; instants before the origin clamp to zero.
    pub fn from_unix(&self, unix: f64) -> SimTime {
        SimTime::from_secs_f64((unix - self.origin_unix).max(0.0))
    }

    pub fn instant_at(&self, t: SimTime) -> Instant {
        self.origin + Duration::from_micros(t.as_micros())
    }

    pub async fn sleep_until(&self, t: SimTime) {
        tokio::time::sleep_until(self.instant_at(t)).await;
    }
}

pub fn to_std(d: SimDuration) -> Duration {
    Duration::from_micros(d.as_micros())
}

pub fn from_std(d: Duration) -> SimDuration {
    SimDuration(d.as_micros() as u64)
}
