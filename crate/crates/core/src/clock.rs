//! Monotonic clocks used for latency measurement and clip pacing.
//!
//! All times in the crate are [`Duration`] offsets from a clock origin. Three
//! implementations exist:
//!
//! - [`WallClock`]: real monotonic time, optionally scaled for accelerated replay.
//! - [`VirtualClock`]: simulated time that only moves when someone sleeps on it.
//!   Runs driven by a virtual clock are fully deterministic and finish in
//!   microseconds regardless of the simulated latencies.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;

    /// Block until `now() >= deadline`. Returns immediately if already past.
    fn sleep_until(&self, deadline: Duration);

    fn sleep(&self, d: Duration) {
        let deadline = self.now() + d;
        self.sleep_until(deadline);
    }
}

pub type SharedClock = Arc<dyn Clock>;

/// Real monotonic clock. `factor` > 1 makes simulated time run faster than
/// wall time (a 15 s clip at factor 10 takes 1.5 s of wall time).
#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
    factor: f64,
}

impl WallClock {
    pub fn new() -> Self {
        Self::scaled(1.0)
    }

    pub fn scaled(factor: f64) -> Self {
        assert!(factor > 0.0 && factor.is_finite(), "clock factor must be positive");
        Self { origin: Instant::now(), factor }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        let real = self.origin.elapsed();
        if self.factor == 1.0 {
            real
        } else {
            real.mul_f64(self.factor)
        }
    }

    fn sleep_until(&self, deadline: Duration) {
        let now = self.now();
        if deadline > now {
            std::thread::sleep((deadline - now).div_f64(self.factor));
        }
    }
}

/// Simulated clock. `sleep_until` jumps time forward instead of blocking.
///
/// Each worker in a simulated run owns its own `VirtualClock`, so the two
/// timelines never race on a shared counter.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(t: Duration) -> Self {
        Self { now: Mutex::new(t) }
    }

    pub fn set(&self, t: Duration) {
        *self.now.lock().unwrap() = t;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep_until(&self, deadline: Duration) {
        let mut now = self.now.lock().unwrap();
        if deadline > *now {
            *now = deadline;
        }
    }
}

/// Serde helpers that encode [`Duration`] as floating-point seconds.
pub mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
            match d {
                Some(d) => s.serialize_some(&d.as_secs_f64()),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
            Option::<f64>::deserialize(d)?
                .map(|v| Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_only_moves_forward() {
        let c = VirtualClock::new();
        c.sleep(Duration::from_secs(15));
        assert_eq!(c.now(), Duration::from_secs(15));
        c.sleep_until(Duration::from_secs(3));
        assert_eq!(c.now(), Duration::from_secs(15));
    }

    #[test]
    fn scaled_wall_clock_runs_faster() {
        let c = WallClock::scaled(1000.0);
        c.sleep(Duration::from_secs(2));
        assert!(c.now() >= Duration::from_secs(2));
    }
}
