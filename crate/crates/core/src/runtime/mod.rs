//! Simulated serverless substrate: event queue, network links, workers,
//! function and policy registries, monitor, autoscaler and failure detection.

mod events;
mod monitor;
mod network;
mod registry;
mod scaling;

use thiserror::Error;

pub use events::EventQueue;
pub use monitor::{Monitor, MonitorSample};
pub use network::{transmit, LinkState, NetworkLink, Outage};
pub use registry::{
    Action, FunctionKind, FunctionRegistry, FunctionSpec, Observation, Policy, Rule, Trigger,
};
pub use scaling::{
    provision, AutoscaleConfig, ScalingOutcome, ScalingScenario, WorkerPool,
};

use crate::datamodel::SimTime;

#[derive(Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("link `{link}` is down at {at}")]
    LinkDown { link: String, at: SimTime },
    #[error("duplicate id `{0}`")]
    Duplicate(String),
    #[error("unknown id `{0}`")]
    Unknown(String),
    #[error("policy `{0}` has no default action")]
    NoDefaultAction(String),
    #[error("invalid runtime config: {0}")]
    Config(String),
    #[error(transparent)]
    Profile(#[from] crate::oracle::OracleError),
}

/// A single serial worker (one replica of a function).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Worker {
    pub busy_until: SimTime,
    /// Busy intervals, in order.
    pub busy_log: Vec<(SimTime, SimTime)>,
}

impl Worker {
    /// Reserves `duration` starting no earlier than `ready`; returns (start, end).
    pub fn reserve(&mut self, ready: SimTime, duration: SimTime) -> (SimTime, SimTime) {
        let start = ready.max(self.busy_until);
        let end = start + duration;
        self.busy_until = end;
        if duration > SimTime::ZERO {
            self.busy_log.push((start, end));
        }
        (start, end)
    }

    /// Busy time overlapping `[from, to)`.
    pub fn busy_within(&self, from: SimTime, to: SimTime) -> SimTime {
        let mut total = 0u64;
        for (s, e) in self.busy_log.iter().rev() {
            // reservations are serial, so end times are ordered
            if *e <= from {
                break;
            }
            let lo = s.0.max(from.0);
            let hi = e.0.min(to.0);
            if hi > lo {
                total += hi - lo;
            }
        }
        SimTime(total)
    }
}

/// Heartbeat-based failure detector settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HeartbeatConfig {
    pub interval_s: f64,
    pub missed_beats: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        HeartbeatConfig {
            interval_s: 1.0,
            missed_beats: 3,
        }
    }
}

impl HeartbeatConfig {
    pub fn interval(&self) -> SimTime {
        SimTime::from_secs_f64(self.interval_s)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !(self.interval_s > 0.0) || self.missed_beats == 0 {
            return Err(RuntimeError::Config(
                "heartbeat interval must be positive and missed_beats >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Counts consecutive missed heartbeats and flips cloud availability.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureDetector {
    config: HeartbeatConfig,
    missed: u32,
    available: bool,
}

impl FailureDetector {
    pub fn new(config: HeartbeatConfig) -> Self {
        FailureDetector {
            config,
            missed: 0,
            available: true,
        }
    }

    pub fn cloud_available(&self) -> bool {
        self.available
    }

    /// Records one heartbeat outcome; returns `Some(new_state)` on a transition.
    pub fn beat(&mut self, answered: bool) -> Option<bool> {
        if answered {
            self.missed = 0;
            if !self.available {
                self.available = true;
                return Some(true);
            }
        } else {
            self.missed += 1;
            if self.available && self.missed >= self.config.missed_beats {
                self.available = false;
                return Some(false);
            }
        }
        None
    }
}
