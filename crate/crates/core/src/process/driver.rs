use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::plugin::{Schedule, Side};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DriverError {
    #[error("lifecycle aborted: {0}")]
    Aborted(String),
    #[error("barrier schedule mismatch: {0}")]
    ScheduleMismatch(String),
    #[error("coordinator protocol error: {0}")]
    Protocol(String),
    #[error("coordinator connection: {0}")]
    Io(String),
}

/// What a process tells its driver when a lifecycle starts.
#[derive(Debug, Clone)]
pub struct BeginInfo<'a> {
    pub side: Side,
    pub local: &'a Schedule,
    pub resources: &'a BTreeSet<String>,
    /// Schedule hash stored in the image being restored (restart side only).
    pub image_hash: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lifecycle {
    pub id: u64,
    pub schedule: Schedule,
    pub worker_id: u64,
    /// Number of workers taking part.
    pub world: u64,
}

/// Sequences the barriers of a lifecycle: alone, or in lockstep with other
/// processes through a coordinator.
pub trait BarrierDriver {
    /// Whether someone else has asked for a checkpoint. Polled at every
    /// cycle boundary.
    fn poll(&mut self) -> bool {
        false
    }

    fn begin(&mut self, info: BeginInfo<'_>) -> Result<Lifecycle, DriverError>;

    /// Reports arrival at `barrier` and blocks until it is released.
    fn arrive(&mut self, barrier: &str) -> Result<(), DriverError>;

    /// Elected leaders of shared resources for the current lifecycle.
    fn leaders(&self) -> BTreeMap<String, u64>;

    /// Abandons the current lifecycle.
    fn fail(&mut self, reason: &str);

    /// Reports a completed lifecycle; `result` is the image path on the
    /// checkpoint side.
    fn finish(&mut self, _result: &str) {}
}

/// A single process: its local schedule is the schedule and it leads every
/// resource it declares.
#[derive(Debug, Clone)]
pub struct Standalone {
    pub worker_id: u64,
    resources: BTreeSet<String>,
}

impl Standalone {
    pub fn new() -> Self {
        Self::with_worker_id(1)
    }

    pub fn with_worker_id(worker_id: u64) -> Self {
        Self {
            worker_id,
            resources: BTreeSet::new(),
        }
    }
}

impl Default for Standalone {
    fn default() -> Self {
        Self::new()
    }
}

impl BarrierDriver for Standalone {
    fn begin(&mut self, info: BeginInfo<'_>) -> Result<Lifecycle, DriverError> {
        self.resources = info.resources.clone();
        Ok(Lifecycle {
            id: 0,
            schedule: info.local.clone(),
            worker_id: self.worker_id,
            world: 1,
        })
    }

    fn arrive(&mut self, _barrier: &str) -> Result<(), DriverError> {
        Ok(())
    }

    fn leaders(&self) -> BTreeMap<String, u64> {
        self.resources.iter().map(|r| (r.clone(), self.worker_id)).collect()
    }

    fn fail(&mut self, reason: &str) {
        log::warn!("lifecycle abandoned: {reason}");
    }
}
