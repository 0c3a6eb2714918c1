//! Monotonic interval bookkeeping.
//!
//! A run is split by four instants: start, ready (setup finished), done
//! (algorithm finished) and end (teardown finished). Every reported interval
//! is the difference of two adjacent instants, so setup + wall + teardown
//! equals the full span exactly and no interval is counted twice.

use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Intervals {
    pub start: Instant,
    pub ready: Instant,
    pub done: Instant,
    pub end: Instant,
}

impl Intervals {
    /// A run without setup or teardown.
    pub fn bare(start: Instant, end: Instant) -> Self {
        Intervals { start, ready: start, done: end, end }
    }

    pub fn setup(&self) -> Duration {
        self.ready - self.start
    }

    pub fn wall(&self) -> Duration {
        self.done - self.ready
    }

    pub fn teardown(&self) -> Duration {
        self.end - self.done
    }

    pub fn span(&self) -> Duration {
        self.end - self.start
    }

    /// `(setup, wall, teardown, span)` in nanoseconds, each taken from the
    /// offsets of the instants relative to `start`, so the first three sum
    /// to the span exactly.
    pub fn split_ns(&self) -> (u64, u64, u64, u64) {
        let ready = nanos(self.setup());
        let done = nanos(self.done - self.start);
        let end = nanos(self.span());
        (ready, done - ready, end - done, end)
    }

    pub fn setup_timing(&self) -> SetupTiming {
        let (setup_ns, _, teardown_ns, _) = self.split_ns();
        SetupTiming { setup_ns, teardown_ns }
    }
}

/// Worker or device setup cost, measured apart from the algorithm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SetupTiming {
    pub setup_ns: u64,
    pub teardown_ns: u64,
}

impl SetupTiming {
    /// Setup and teardown together, the overhead interval reported per run.
    pub fn overhead_ns(&self) -> u64 {
        self.setup_ns + self.teardown_ns
    }
}

pub fn nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

/// A result with the instants that bracket it.
#[derive(Debug, Clone)]
pub struct Timed<T> {
    pub value: T,
    pub intervals: Intervals,
}
