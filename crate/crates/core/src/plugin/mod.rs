//! Plugins, the checkpoint/restart event lifecycle and checkpoint control.
//!
//! A checkpoint walks the barrier schedule `Suspend, Drain, WriteCkpt,
//! Resume, Refill`; a restart walks `Restart, Refill`. Checkpoint-side
//! built-in events visit plugins from the highest rank down, restart-side
//! events from the lowest rank up. Custom barriers are spliced in after the
//! built-in phase they anchor to and only notify the plugin that declared
//! them.

mod builtin;
mod control;
mod schedule;
mod shared;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::call::{CallError, CallName};
use crate::emulator::Netlist;
use crate::runtime::Runtime;
use crate::virt::{LayerStack, VirtError, VirtTables, Wrapper};

pub use builtin::{ConnVirt, EnvVirt, LockPatch, PathVirt, TidVirt};
pub use control::{CkptControl, ControlError, Ticket, DEFAULT_GATE_TIMEOUT, GATE_POLL_INTERVAL};
pub use schedule::{BarrierStep, Schedule, Side};
pub use shared::SharedLink;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Event {
    Suspend,
    Drain,
    WriteCkpt,
    Resume,
    Restart,
    Refill,
    Custom(String),
}

impl Event {
    pub const BUILTIN: [Event; 6] = [
        Event::Suspend,
        Event::Drain,
        Event::WriteCkpt,
        Event::Resume,
        Event::Restart,
        Event::Refill,
    ];

    pub fn name(&self) -> &str {
        match self {
            Event::Suspend => "Suspend",
            Event::Drain => "Drain",
            Event::WriteCkpt => "WriteCkpt",
            Event::Resume => "Resume",
            Event::Restart => "Restart",
            Event::Refill => "Refill",
            Event::Custom(n) => n,
        }
    }

    pub fn builtin(name: &str) -> Option<Event> {
        Event::BUILTIN.into_iter().find(|e| e.name() == name)
    }

    /// Top-down for the checkpoint-side phases, bottom-up otherwise.
    pub fn descending(&self) -> bool {
        matches!(self, Event::Suspend | Event::Drain | Event::WriteCkpt)
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CustomBarrier {
    pub name: String,
    /// Built-in phase this barrier follows.
    pub anchor: Event,
}

impl CustomBarrier {
    pub fn new(name: &str, anchor: Event) -> Self {
        Self {
            name: name.to_string(),
            anchor,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PluginError {
    #[error("duplicate plugin name `{0}`")]
    DuplicateName(String),
    #[error("two plugins at rank {0}")]
    DuplicateRank(u32),
    #[error("rank 0 belongs to the runtime")]
    ReservedRank,
    #[error("custom barrier `{0}` is declared twice or shadows a built-in phase")]
    DuplicateBarrier(String),
    #[error("custom barrier `{barrier}` anchors to `{anchor}`, which is not a built-in phase")]
    BadAnchor { barrier: String, anchor: String },
    #[error("plugin `{plugin}` must rank above `{below}`")]
    Misordered { plugin: String, below: String },
    #[error("unknown plugin `{0}`")]
    UnknownPlugin(String),
    #[error("plugin `{plugin}`: {msg}")]
    BadOption { plugin: String, msg: String },
    #[error("plugin `{plugin}` failed at {event}: {msg}")]
    Hook {
        plugin: String,
        event: String,
        msg: String,
    },
    #[error("plugin `{plugin}` blob: {msg}")]
    Codec { plugin: String, msg: String },
    #[error("image carries state for unregistered plugin `{0}`")]
    UnknownBlob(String),
    #[error("image has no state for mandatory plugin `{0}`")]
    MissingBlob(String),
    #[error(transparent)]
    Call(#[from] CallError),
    #[error(transparent)]
    Virt(#[from] VirtError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

impl PluginError {
    pub fn hook(plugin: &str, event: &Event, msg: impl fmt::Display) -> Self {
        PluginError::Hook {
            plugin: plugin.to_string(),
            event: event.to_string(),
            msg: msg.to_string(),
        }
    }

    pub fn codec(plugin: &str, msg: impl fmt::Display) -> Self {
        PluginError::Codec {
            plugin: plugin.to_string(),
            msg: msg.to_string(),
        }
    }
}

/// Handles every plugin may use. Plugins talk to the runtime directly; the
/// workload only ever reaches it through `stack`.
#[derive(Clone)]
pub struct PluginEnv {
    pub runtime: Arc<Runtime>,
    pub tables: Arc<VirtTables>,
    pub control: Arc<CkptControl>,
    pub stack: Arc<LayerStack>,
    pub netlist: Arc<Netlist>,
}

/// A lock as recorded in an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockImage {
    pub id: u64,
    pub owner_real: Option<u64>,
    pub owner_virtual: Option<u64>,
}

/// What a restart changed, for the plugins that have to patch things up.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RestartInfo {
    pub incarnation: u64,
    pub tid_assignment: BTreeMap<u64, u64>,
    pub conn_assignment: BTreeMap<u64, u64>,
    pub locks: Vec<LockImage>,
}

pub struct EventCtx<'a> {
    pub env: &'a PluginEnv,
    pub restart: Option<&'a RestartInfo>,
    /// Shared resource id -> elected worker id, for the current lifecycle.
    pub leaders: &'a BTreeMap<String, u64>,
    pub worker_id: u64,
    pub cycle: u64,
}

impl EventCtx<'_> {
    pub fn is_leader(&self, resource: &str) -> bool {
        self.leaders.get(resource) == Some(&self.worker_id)
    }
}

pub trait Plugin: Send + Sync {
    fn name(&self) -> &str;
    fn rank(&self) -> u32;

    /// Optional plugins may be missing at restart even if the image has a
    /// blob for them.
    fn optional(&self) -> bool {
        false
    }

    fn wrappers(self: Arc<Self>, _env: &PluginEnv) -> Vec<(CallName, Arc<dyn Wrapper>)> {
        Vec::new()
    }

    fn custom_barriers(&self) -> Vec<CustomBarrier> {
        Vec::new()
    }

    /// Shared resources this plugin needs a leader for.
    fn resources(&self) -> Vec<String> {
        Vec::new()
    }

    fn on_launch(&self, _ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        Ok(())
    }

    fn on_event(&self, _event: &Event, _ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        Ok(())
    }

    /// `None` leaves no section in the image.
    fn save(&self, _ctx: &EventCtx<'_>) -> Result<Option<Vec<u8>>, PluginError> {
        Ok(Some(Vec::new()))
    }

    fn load(&self, _blob: &[u8], _ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        Ok(())
    }

    /// The config line that recreates this plugin.
    fn spec_line(&self) -> String {
        format!("plugin {} rank {}", self.name(), self.rank())
    }
}

/// A validated set of plugins, kept in ascending rank order.
#[derive(Clone, Default)]
pub struct PluginSet {
    plugins: Vec<Arc<dyn Plugin>>,
}

impl fmt::Debug for PluginSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.plugins.iter().map(|p| (p.name().to_string(), p.rank())))
            .finish()
    }
}

impl PluginSet {
    pub fn new(plugins: Vec<Arc<dyn Plugin>>) -> Result<Self, PluginError> {
        let mut set = PluginSet::default();
        for p in plugins {
            set.register(p)?;
        }
        Ok(set)
    }

    pub fn register(&mut self, plugin: Arc<dyn Plugin>) -> Result<(), PluginError> {
        if plugin.rank() == 0 {
            return Err(PluginError::ReservedRank);
        }
        if self.get(plugin.name()).is_some() {
            return Err(PluginError::DuplicateName(plugin.name().to_string()));
        }
        if self.plugins.iter().any(|p| p.rank() == plugin.rank()) {
            return Err(PluginError::DuplicateRank(plugin.rank()));
        }
        let mut seen: BTreeSet<String> = Event::BUILTIN.iter().map(|e| e.name().to_string()).collect();
        for p in self.plugins.iter().chain(std::iter::once(&plugin)) {
            for b in p.custom_barriers() {
                if Event::builtin(b.anchor.name()).is_none() {
                    return Err(PluginError::BadAnchor {
                        barrier: b.name,
                        anchor: b.anchor.name().to_string(),
                    });
                }
                if !seen.insert(b.name.clone()) {
                    return Err(PluginError::DuplicateBarrier(b.name));
                }
            }
        }
        let at = self
            .plugins
            .iter()
            .position(|p| p.rank() > plugin.rank())
            .unwrap_or(self.plugins.len());
        self.plugins.insert(at, plugin);
        if let (Some(tid), Some(patch)) = (self.get(TidVirt::NAME), self.get(LockPatch::NAME)) {
            if patch.rank() < tid.rank() {
                let (plugin, below) = (patch.name().to_string(), tid.name().to_string());
                self.plugins.retain(|p| p.name() != plugin);
                return Err(PluginError::Misordered { plugin, below });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Plugin>> {
        self.plugins.iter().find(|p| p.name() == name)
    }

    pub fn len(&self) -> usize {
        self.plugins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plugins.is_empty()
    }

    pub fn ascending(&self) -> impl DoubleEndedIterator<Item = &Arc<dyn Plugin>> {
        self.plugins.iter()
    }

    /// Plugins in the order they see `event`.
    pub fn ordered_for(&self, event: &Event) -> Vec<&Arc<dyn Plugin>> {
        if event.descending() {
            self.plugins.iter().rev().collect()
        } else {
            self.plugins.iter().collect()
        }
    }

    /// `(plugin, barrier)` in registration order.
    pub fn custom_barriers(&self) -> Vec<(String, CustomBarrier)> {
        self.plugins
            .iter()
            .flat_map(|p| {
                p.custom_barriers()
                    .into_iter()
                    .map(move |b| (p.name().to_string(), b))
            })
            .collect()
    }

    pub fn resources(&self) -> BTreeSet<String> {
        self.plugins.iter().flat_map(|p| p.resources()).collect()
    }

    pub fn install(&self, env: &PluginEnv) -> Result<(), PluginError> {
        for p in &self.plugins {
            for (call, wrapper) in p.clone().wrappers(env) {
                env.stack.install(p.rank(), call, p.name(), wrapper)?;
            }
        }
        Ok(())
    }

    /// Runs one barrier step. Built-in events visit every plugin in the
    /// event's direction; custom barriers only their owner. Stops at the
    /// first failure.
    pub fn dispatch(&self, step: &BarrierStep, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        match &step.owner {
            Some(owner) => match self.get(owner) {
                Some(p) => p.on_event(&step.event, ctx),
                None => Ok(()),
            },
            None => {
                for p in self.ordered_for(&step.event) {
                    p.on_event(&step.event, ctx)?;
                }
                Ok(())
            }
        }
    }

    pub fn spec_lines(&self) -> Vec<String> {
        self.plugins.iter().map(|p| p.spec_line()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Bare(&'static str, u32, Vec<CustomBarrier>);

    impl Plugin for Bare {
        fn name(&self) -> &str {
            self.0
        }
        fn rank(&self) -> u32 {
            self.1
        }
        fn custom_barriers(&self) -> Vec<CustomBarrier> {
            self.2.clone()
        }
    }

    fn bare(name: &'static str, rank: u32) -> Arc<dyn Plugin> {
        Arc::new(Bare(name, rank, Vec::new()))
    }

    #[test]
    fn registration_rules() {
        let mut set = PluginSet::new(vec![bare("a", 10)]).unwrap();
        assert_eq!(set.register(bare("b", 10)), Err(PluginError::DuplicateRank(10)));
        assert_eq!(set.register(bare("a", 11)), Err(PluginError::DuplicateName("a".into())));
        assert_eq!(set.register(bare("z", 0)), Err(PluginError::ReservedRank));
        set.register(bare("c", 5)).unwrap();
        let names: Vec<_> = set.ascending().map(|p| p.name().to_string()).collect();
        assert_eq!(names, ["c", "a"]);
    }

    #[test]
    fn custom_barrier_rules() {
        let dup = Arc::new(Bare("x", 1, vec![CustomBarrier::new("Drain", Event::Suspend)]));
        assert!(matches!(PluginSet::new(vec![dup]), Err(PluginError::DuplicateBarrier(_))));
        let anchored = Arc::new(Bare("x", 1, vec![CustomBarrier::new("b", Event::Custom("q".into()))]));
        assert!(matches!(PluginSet::new(vec![anchored]), Err(PluginError::BadAnchor { .. })));
        let a = Arc::new(Bare("x", 1, vec![CustomBarrier::new("b", Event::Drain)]));
        let b = Arc::new(Bare("y", 2, vec![CustomBarrier::new("b", Event::Resume)]));
        assert!(matches!(PluginSet::new(vec![a, b]), Err(PluginError::DuplicateBarrier(_))));
    }

    #[test]
    fn direction_per_event() {
        let set = PluginSet::new(vec![bare("b", 20), bare("a", 10), bare("c", 30)]).unwrap();
        let ranks = |e: Event| set.ordered_for(&e).iter().map(|p| p.rank()).collect::<Vec<_>>();
        assert_eq!(ranks(Event::WriteCkpt), [30, 20, 10]);
        assert_eq!(ranks(Event::Restart), [10, 20, 30]);
        assert_eq!(ranks(Event::Refill), [10, 20, 30]);
    }
}
