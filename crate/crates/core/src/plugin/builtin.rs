use std::sync::Arc;

use crate::call::{Call, CallName, Reply};
use crate::engine::patch_locks;
use crate::virt::{Next, TranslationTable, VirtTables, Wrapper};

use super::{Event, EventCtx, Plugin, PluginEnv, PluginError};

fn read<T: Clone>(lock: &std::sync::RwLock<T>) -> T {
    lock.read().unwrap_or_else(|e| e.into_inner()).clone()
}

fn restart_info<'a>(name: &str, ctx: &'a EventCtx<'_>) -> Result<&'a super::RestartInfo, PluginError> {
    ctx.restart
        .ok_or_else(|| PluginError::hook(name, &Event::Restart, "no restart information"))
}

/// Task-id virtualization: the workload sees dense virtual tids that survive
/// restarts.
pub struct TidVirt {
    rank: u32,
}

impl TidVirt {
    pub const NAME: &'static str = "tid-virt";

    pub fn new(rank: u32) -> Self {
        Self { rank }
    }
}

fn tid_wrapper(tables: Arc<VirtTables>) -> Arc<dyn Wrapper> {
    Arc::new(move |call: Call, next: Next<'_>| {
        let real = |v: u64| tables.tids.read().unwrap_or_else(|e| e.into_inner()).to_real(v);
        match call {
            Call::Spawn { .. } => match next.call(call)? {
                Reply::Tid(r) => {
                    let v = tables.tids.write().unwrap_or_else(|e| e.into_inner()).register(r)?;
                    Ok(Reply::Tid(v))
                }
                other => Ok(other),
            },
            Call::Kill { tid, sig } => next.call(Call::Kill { tid: real(tid)?, sig }),
            Call::Lock { lock, tid } => next.call(Call::Lock { lock, tid: real(tid)? }),
            Call::Unlock { lock, tid } => next.call(Call::Unlock { lock, tid: real(tid)? }),
            other => next.call(other),
        }
    })
}

impl Plugin for TidVirt {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn wrappers(self: Arc<Self>, env: &PluginEnv) -> Vec<(CallName, Arc<dyn Wrapper>)> {
        let w = tid_wrapper(env.tables.clone());
        [CallName::Spawn, CallName::Kill, CallName::Lock, CallName::Unlock]
            .into_iter()
            .map(|c| (c, w.clone()))
            .collect()
    }

    fn save(&self, ctx: &EventCtx<'_>) -> Result<Option<Vec<u8>>, PluginError> {
        Ok(Some(ctx.env.tables.tid_table().to_bytes()))
    }

    fn load(&self, blob: &[u8], ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        let table = TranslationTable::from_bytes(blob).map_err(|e| PluginError::codec(self.name(), e))?;
        *ctx.env.tables.tids.write().unwrap_or_else(|e| e.into_inner()) = table;
        Ok(())
    }

    fn on_event(&self, event: &Event, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        if *event == Event::Restart {
            let info = restart_info(self.name(), ctx)?;
            ctx.env
                .tables
                .tids
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .remap_on_restart(&info.tid_assignment)?;
        }
        Ok(())
    }
}

/// Connection-handle virtualization.
pub struct ConnVirt {
    rank: u32,
}

impl ConnVirt {
    pub const NAME: &'static str = "conn-virt";

    pub fn new(rank: u32) -> Self {
        Self { rank }
    }
}

impl Plugin for ConnVirt {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn wrappers(self: Arc<Self>, env: &PluginEnv) -> Vec<(CallName, Arc<dyn Wrapper>)> {
        let tables = env.tables.clone();
        let w: Arc<dyn Wrapper> = Arc::new(move |call: Call, next: Next<'_>| {
            let real = |v: u64| tables.conns.read().unwrap_or_else(|e| e.into_inner()).to_real(v);
            match call {
                Call::Connect { .. } => match next.call(call)? {
                    Reply::Handle(r) => {
                        let v = tables.conns.write().unwrap_or_else(|e| e.into_inner()).register(r)?;
                        Ok(Reply::Handle(v))
                    }
                    other => Ok(other),
                },
                Call::Send { handle, data } => next.call(Call::Send { handle: real(handle)?, data }),
                Call::Recv { handle, max } => next.call(Call::Recv { handle: real(handle)?, max }),
                other => next.call(other),
            }
        });
        [CallName::Connect, CallName::Send, CallName::Recv]
            .into_iter()
            .map(|c| (c, w.clone()))
            .collect()
    }

    fn save(&self, ctx: &EventCtx<'_>) -> Result<Option<Vec<u8>>, PluginError> {
        Ok(Some(ctx.env.tables.conn_table().to_bytes()))
    }

    fn load(&self, blob: &[u8], ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        let table = TranslationTable::from_bytes(blob).map_err(|e| PluginError::codec(self.name(), e))?;
        *ctx.env.tables.conns.write().unwrap_or_else(|e| e.into_inner()) = table;
        Ok(())
    }

    fn on_event(&self, event: &Event, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        if *event == Event::Restart {
            let info = restart_info(self.name(), ctx)?;
            ctx.env
                .tables
                .conns
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .remap_on_restart(&info.conn_assignment)?;
        }
        Ok(())
    }
}

/// Path rewriting, including `/proc/<virtual tid>` names. The rules
/// themselves live in the shared tables and travel in the core image.
pub struct PathVirt {
    rank: u32,
}

impl PathVirt {
    pub const NAME: &'static str = "path-virt";

    pub fn new(rank: u32) -> Self {
        Self { rank }
    }
}

impl Plugin for PathVirt {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn wrappers(self: Arc<Self>, env: &PluginEnv) -> Vec<(CallName, Arc<dyn Wrapper>)> {
        let tables = env.tables.clone();
        let w: Arc<dyn Wrapper> = Arc::new(move |call: Call, next: Next<'_>| match call {
            Call::OpenPath { path } => {
                let tids = tables.tid_table();
                let paths = read(&tables.paths);
                let proc_table = (!tids.is_empty()).then_some(&tids);
                next.call(Call::OpenPath {
                    path: paths.rewrite(&path, proc_table)?,
                })
            }
            other => next.call(other),
        });
        vec![(CallName::OpenPath, w)]
    }
}

/// Environment overrides consulted before the runtime's environment.
pub struct EnvVirt {
    rank: u32,
}

impl EnvVirt {
    pub const NAME: &'static str = "env-virt";

    pub fn new(rank: u32) -> Self {
        Self { rank }
    }
}

impl Plugin for EnvVirt {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn wrappers(self: Arc<Self>, env: &PluginEnv) -> Vec<(CallName, Arc<dyn Wrapper>)> {
        let tables = env.tables.clone();
        let w: Arc<dyn Wrapper> = Arc::new(move |call: Call, next: Next<'_>| match call {
            Call::Getenv { key } => {
                let overridden = read(&tables.env).get(&key).map(|v| v.map(str::to_owned));
                match overridden {
                    Some(v) => Ok(Reply::Env(v)),
                    None => next.call(Call::Getenv { key }),
                }
            }
            other => next.call(other),
        });
        vec![(CallName::Getenv, w)]
    }
}

/// Rewrites lock owners to the fresh real tid of the same virtual task.
/// Must rank above `tid-virt` so the tid table is already remapped.
pub struct LockPatch {
    rank: u32,
}

impl LockPatch {
    pub const NAME: &'static str = "lock-patch";

    pub fn new(rank: u32) -> Self {
        Self { rank }
    }
}

impl Plugin for LockPatch {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn on_event(&self, event: &Event, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        if *event == Event::Restart {
            let info = restart_info(self.name(), ctx)?;
            let tids = ctx.env.tables.tid_table();
            for record in patch_locks(&info.locks, &tids)? {
                ctx.env.runtime.set_lock(record);
            }
        }
        Ok(())
    }
}
