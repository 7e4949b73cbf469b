//! Time sources. The manager never reads system time directly; everything
//! goes through a [`Clock`] so the harness can drive it on virtual time.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;

    /// Blocks until `deadline` has been reached. Returns `false` if the wait
    /// was cut short by a shutdown request; callers must then stop without
    /// issuing further writes.
    fn sleep_until(&self, deadline: DateTime<Utc>) -> bool;
}

/// Cooperative termination flag shared between signal handlers, clocks and
/// the control loop.
#[derive(Clone, Debug, Default)]
pub struct Shutdown(Arc<AtomicBool>);

impl Shutdown {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_requested(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    /// Sets the flag on SIGTERM and SIGINT.
    pub fn register_signals(&self) -> std::io::Result<()> {
        for signal in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
            signal_hook::flag::register(signal, Arc::clone(&self.0))?;
        }
        Ok(())
    }
}

/// Wall-clock time. Sleeps in short slices so a shutdown request is noticed
/// promptly.
#[derive(Clone, Debug)]
pub struct SystemClock {
    shutdown: Shutdown,
}

const SLEEP_SLICE: Duration = Duration::from_millis(100);

impl SystemClock {
    pub fn new(shutdown: Shutdown) -> Self {
        Self { shutdown }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep_until(&self, deadline: DateTime<Utc>) -> bool {
        loop {
            if self.shutdown.is_requested() {
                return false;
            }
            let remaining = match (deadline - Utc::now()).to_std() {
                Ok(d) if !d.is_zero() => d,
                _ => return true,
            };
            std::thread::sleep(remaining.min(SLEEP_SLICE));
        }
    }
}

/// A clock that only moves when told to. `sleep_until` jumps straight to the
/// deadline.
#[derive(Clone, Debug)]
pub struct ManualClock {
    now: Arc<Mutex<DateTime<Utc>>>,
    shutdown: Shutdown,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self::with_shutdown(start, Shutdown::new())
    }

    pub fn with_shutdown(start: DateTime<Utc>, shutdown: Shutdown) -> Self {
        Self { now: Arc::new(Mutex::new(start)), shutdown }
    }

    pub fn set(&self, now: DateTime<Utc>) {
        *self.now.lock().unwrap() = now;
    }

    pub fn advance(&self, by: chrono::Duration) {
        *self.now.lock().unwrap() += by;
    }

    pub fn shutdown(&self) -> &Shutdown {
        &self.shutdown
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }

    fn sleep_until(&self, deadline: DateTime<Utc>) -> bool {
        if self.shutdown.is_requested() {
            return false;
        }
        let mut now = self.now.lock().unwrap();
        if deadline > *now {
            *now = deadline;
        }
        true
    }
}

/// RFC 3339 in UTC with second precision, the format used for annotations
/// and markers.
pub fn rfc3339(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_rfc3339(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim()).ok().map(|t| t.with_timezone(&Utc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn manual_clock_jumps_forward_only() {
        let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let clock = ManualClock::new(start);
        assert!(clock.sleep_until(start + chrono::Duration::seconds(30)));
        assert_eq!(clock.now(), start + chrono::Duration::seconds(30));
        assert!(clock.sleep_until(start));
        assert_eq!(clock.now(), start + chrono::Duration::seconds(30));
    }

    #[test]
    fn shutdown_interrupts_sleep() {
        let shutdown = Shutdown::new();
        let clock = SystemClock::new(shutdown.clone());
        shutdown.request();
        assert!(!clock.sleep_until(Utc::now() + chrono::Duration::hours(1)));
    }

    #[test]
    fn rfc3339_round_trip() {
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        assert_eq!(rfc3339(t), "2024-01-01T00:00:00Z");
        assert_eq!(parse_rfc3339("2024-01-01T00:00:00Z"), Some(t));
        assert_eq!(parse_rfc3339("2024-01-01T01:00:00+01:00"), Some(t));
        assert_eq!(parse_rfc3339("yesterday"), None);
    }
}
