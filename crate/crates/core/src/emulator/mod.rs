//! Deterministic single-clock gate-level simulator: the hardware-emulator
//! workload that gets checkpointed and fault-injected.

mod netlist;
mod sim;

pub use netlist::{
    Driver, Gate, GateKind, NetId, Netlist, NetlistError, NetlistErrorKind, OutputPort, Register,
};
pub use sim::{
    format_bits, parse_bits, Bits, EmulatorState, NetOverride, OverrideAction, RegisterBank,
    SimError, SnapshotError, StepOutcome, Stimulus, StimulusError, Trace,
};

pub(crate) use netlist::content_hash;
