//! The interposable call interface between the workload and the runtime.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::emulator::{Bits, NetOverride, SimError, StepOutcome};
use crate::virt::VirtError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CallName {
    Spawn,
    Kill,
    Lock,
    Unlock,
    OpenPath,
    Getenv,
    Connect,
    Send,
    Recv,
    ClockStep,
}

impl CallName {
    pub const ALL: [CallName; 10] = [
        CallName::Spawn,
        CallName::Kill,
        CallName::Lock,
        CallName::Unlock,
        CallName::OpenPath,
        CallName::Getenv,
        CallName::Connect,
        CallName::Send,
        CallName::Recv,
        CallName::ClockStep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CallName::Spawn => "spawn_task",
            CallName::Kill => "kill_task",
            CallName::Lock => "lock",
            CallName::Unlock => "unlock",
            CallName::OpenPath => "open_path",
            CallName::Getenv => "getenv",
            CallName::Connect => "connect",
            CallName::Send => "send",
            CallName::Recv => "recv",
            CallName::ClockStep => "clock_step",
        }
    }
}

impl fmt::Display for CallName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CallName {
    type Err = CallError;

    fn from_str(s: &str) -> Result<Self, CallError> {
        CallName::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CallError::UnknownCall(s.to_string()))
    }
}

/// Arguments of one emulator clock cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClockStep {
    /// Cycle the caller expects to evaluate; must equal the device cycle.
    pub cycle: u64,
    pub inputs: Bits,
    /// Net overrides applied during this cycle's evaluation.
    pub overrides: Vec<NetOverride>,
    /// Registers XOR-flipped immediately before this cycle is evaluated.
    pub reg_flips: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Call {
    Spawn { entry: String },
    Kill { tid: u64, sig: i32 },
    Lock { lock: u64, tid: u64 },
    Unlock { lock: u64, tid: u64 },
    OpenPath { path: String },
    Getenv { key: String },
    Connect { peer: String },
    Send { handle: u64, data: Vec<u8> },
    Recv { handle: u64, max: usize },
    ClockStep(ClockStep),
}

impl Call {
    pub fn name(&self) -> CallName {
        match self {
            Call::Spawn { .. } => CallName::Spawn,
            Call::Kill { .. } => CallName::Kill,
            Call::Lock { .. } => CallName::Lock,
            Call::Unlock { .. } => CallName::Unlock,
            Call::OpenPath { .. } => CallName::OpenPath,
            Call::Getenv { .. } => CallName::Getenv,
            Call::Connect { .. } => CallName::Connect,
            Call::Send { .. } => CallName::Send,
            Call::Recv { .. } => CallName::Recv,
            Call::ClockStep(_) => CallName::ClockStep,
        }
    }

    /// Task id carried in the arguments, if any.
    pub fn tid(&self) -> Option<u64> {
        match self {
            Call::Kill { tid, .. } | Call::Lock { tid, .. } | Call::Unlock { tid, .. } => Some(*tid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReply {
    /// Index of the cycle that was evaluated.
    pub cycle: u64,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Tid(u64),
    Ack,
    File(u64),
    Env(Option<String>),
    Handle(u64),
    Sent(usize),
    Data(Vec<u8>),
    Step(StepReply),
}

impl Reply {
    pub fn tid(&self) -> Option<u64> {
        match self {
            Reply::Tid(t) => Some(*t),
            _ => None,
        }
    }

    pub fn handle(&self) -> Option<u64> {
        match self {
            Reply::Handle(h) => Some(*h),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CallError {
    #[error("unknown call `{0}`")]
    UnknownCall(String),
    #[error("unknown task id {0}")]
    UnknownTid(u64),
    #[error("unknown lock {0}")]
    UnknownLock(u64),
    #[error("lock {lock} is owned by {owner:?}, unlock attempted by {caller}")]
    NotOwner {
        lock: u64,
        owner: Option<u64>,
        caller: u64,
    },
    #[error("lock {lock} is already held by caller {tid}")]
    Relock { lock: u64, tid: u64 },
    #[error("unknown connection handle {0}")]
    UnknownHandle(u64),
    #[error("unsupported peer address `{0}`")]
    UnsupportedPeer(String),
    #[error("too many tasks in one incarnation")]
    TidSpaceExhausted,
    #[error("no emulator device attached")]
    NoDevice,
    #[error("clock step for cycle {got} but the device is at cycle {expected}")]
    CycleMismatch { expected: u64, got: u64 },
    #[error("register index {0} out of range")]
    BadRegister(usize),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Virt(#[from] VirtError),
    #[error("wrapper `{plugin}` failed: {msg}")]
    Wrapper { plugin: String, msg: String },
}

impl From<std::io::Error> for CallError {
    fn from(e: std::io::Error) -> Self {
        CallError::Io(e.to_string())
    }
}

/// Anything that can execute a call: the runtime itself or a layer stack in
/// front of it.
pub trait CallTarget: Send + Sync {
    fn execute(&self, call: Call) -> Result<Reply, CallError>;
}
