//! Virtualization layer: id translation tables, path and environment maps, and
//! the ranked wrapper stack that sits between the workload and the runtime.

mod maps;
mod stack;
mod table;

use std::sync::RwLock;

use thiserror::Error;

pub use maps::{EnvMap, PathMap, VirtConfig};
pub use stack::{LayerStack, Next, Wrapper};
pub use table::{ClassedId, IdClass, TranslationTable};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VirtError {
    #[error("real {class} {real} is already registered")]
    DuplicateReal { class: IdClass, real: u64 },
    #[error("unknown virtual {class} {id}")]
    UnknownVirtual { class: IdClass, id: u64 },
    #[error("unknown real {class} {id}")]
    UnknownReal { class: IdClass, id: u64 },
    #[error("expected a {expected} id, got a {got} id")]
    WrongClass { expected: IdClass, got: IdClass },
    #[error("restart assignment has no new id for real {class} {real}")]
    MissingAssignment { class: IdClass, real: u64 },
    #[error("restart assignment maps two {class}s to real id {real}")]
    Collision { class: IdClass, real: u64 },
    #[error("virtualization config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("a wrapper for `{call}` is already installed at rank {rank}")]
    DuplicateLayer { rank: u32, call: String },
    #[error("rank 0 is reserved for the runtime")]
    ReservedRank,
}

/// Shared translation state consulted by the built-in virtualization plugins.
#[derive(Debug)]
pub struct VirtTables {
    pub tids: RwLock<TranslationTable>,
    pub conns: RwLock<TranslationTable>,
    pub paths: RwLock<PathMap>,
    pub env: RwLock<EnvMap>,
}

impl Default for VirtTables {
    fn default() -> Self {
        Self {
            tids: RwLock::new(TranslationTable::new(IdClass::Tid)),
            conns: RwLock::new(TranslationTable::new(IdClass::Conn)),
            paths: RwLock::new(PathMap::new()),
            env: RwLock::new(EnvMap::new()),
        }
    }
}

impl VirtTables {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_config(cfg: &VirtConfig) -> Self {
        let t = Self::default();
        *t.paths.write().unwrap_or_else(|e| e.into_inner()) = cfg.paths.clone();
        *t.env.write().unwrap_or_else(|e| e.into_inner()) = cfg.env.clone();
        t
    }

    pub fn config(&self) -> VirtConfig {
        VirtConfig {
            paths: self.paths.read().unwrap_or_else(|e| e.into_inner()).clone(),
            env: self.env.read().unwrap_or_else(|e| e.into_inner()).clone(),
        }
    }

    pub fn tid_table(&self) -> TranslationTable {
        self.tids.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn conn_table(&self) -> TranslationTable {
        self.conns.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}
