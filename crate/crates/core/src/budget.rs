use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const DEFAULT_WALL_CLOCK_SECS: u64 = 3600;

/// Per-app analysis limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub wall_clock: Duration,
    /// Cap on method (re)analyses in the interprocedural worklist.
    pub max_taint_iterations: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            wall_clock: Duration::from_secs(DEFAULT_WALL_CLOCK_SECS),
            max_taint_iterations: 1_000_000,
        }
    }
}

impl Budget {
    pub fn with_wall_clock(wall_clock: Duration) -> Self {
        Self {
            wall_clock,
            ..Self::default()
        }
    }

    pub fn start(&self) -> Deadline {
        Deadline::new(self.wall_clock)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Deadline {
    start: Instant,
    limit: Duration,
}

impl Deadline {
    pub fn new(limit: Duration) -> Self {
        Self {
            start: Instant::now(),
            limit,
        }
    }

    pub fn unlimited() -> Self {
        Self::new(Duration::MAX)
    }

    pub fn expired(&self) -> bool {
        self.start.elapsed() >= self.limit
    }

    pub fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }

    pub fn limit(&self) -> Duration {
        self.limit
    }
}
