use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::pilot::DriveCommand;
use super::session::SessionSummary;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveMode {
    #[default]
    Manual,
    Autopilot,
    ManualRecord,
}

impl DriveMode {
    pub fn records(self) -> bool {
        matches!(self, DriveMode::ManualRecord | DriveMode::Autopilot)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DriveMode::Manual => "manual",
            DriveMode::Autopilot => "autopilot",
            DriveMode::ManualRecord => "manual_record",
        }
    }
}

impl std::str::FromStr for DriveMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "manual" => Ok(DriveMode::Manual),
            "autopilot" => Ok(DriveMode::Autopilot),
            "manual_record" => Ok(DriveMode::ManualRecord),
            other => Err(format!(
                "unknown mode {other:?} (expected manual, autopilot or manual_record)"
            )),
        }
    }
}

/// Monotonic time source for the control loop.
pub trait Clock: Send + Sync {
    /// Time since the clock was created.
    fn now(&self) -> Duration;
    fn sleep_until(&self, deadline: Duration);
}

pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep_until(&self, deadline: Duration) {
        let now = self.now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }
}

/// Clock that only moves when slept on or advanced; runs loops faster than real time.
#[derive(Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        *self.now.lock().unwrap_or_else(|e| e.into_inner()) += by;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn sleep_until(&self, deadline: Duration) {
        let mut now = self.now.lock().unwrap_or_else(|e| e.into_inner());
        if deadline > *now {
            *now = deadline;
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Shared surface between the control loop and everything else: the teleop
/// mailbox (latest value wins), the drive mode, the shutdown flag and a live
/// copy of the session summary.
pub struct LoopHandle {
    clock: Arc<dyn Clock>,
    mode: Mutex<DriveMode>,
    drive: Mutex<Option<(DriveCommand, Duration)>>,
    shutdown: AtomicBool,
    summary: Mutex<SessionSummary>,
}

impl LoopHandle {
    pub fn new(clock: Arc<dyn Clock>, mode: DriveMode) -> Arc<Self> {
        Arc::new(Self {
            clock,
            mode: Mutex::new(mode),
            drive: Mutex::new(None),
            shutdown: AtomicBool::new(false),
            summary: Mutex::new(SessionSummary::default()),
        })
    }

    pub fn clock(&self) -> &dyn Clock {
        &*self.clock
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn mode(&self) -> DriveMode {
        *lock(&self.mode)
    }

    pub fn set_mode(&self, mode: DriveMode) {
        *lock(&self.mode) = mode;
    }

    /// Stores a teleop command, clamped; returns the stored value and whether it was clamped.
    pub fn submit_drive(&self, cmd: DriveCommand) -> (DriveCommand, bool) {
        let (cmd, clamped) = cmd.clamped();
        *lock(&self.drive) = Some((cmd, self.clock.now()));
        (cmd, clamped)
    }

    pub fn latest_drive(&self) -> Option<(DriveCommand, Duration)> {
        *lock(&self.drive)
    }

    /// Drops any held teleop command and returns to manual mode, so the next tick
    /// commands zero duty.
    pub fn emergency_stop(&self) {
        *lock(&self.drive) = None;
        self.set_mode(DriveMode::Manual);
    }

    pub fn request_shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }

    pub fn is_shutdown(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }

    pub fn summary(&self) -> SessionSummary {
        lock(&self.summary).clone()
    }

    pub(crate) fn set_summary(&self, summary: &SessionSummary) {
        lock(&self.summary).clone_from(summary);
    }
}
