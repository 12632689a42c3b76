use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::runtime::ConnClass;

use super::{Event, EventCtx, Plugin, PluginError};

#[derive(Default)]
struct LinkState {
    handle: Option<u64>,
    restore: Option<String>,
    last_try: Option<Instant>,
}

/// A connection to an emulator shared by several workers. Only the elected
/// leader saves it, and only the worker whose image holds it reconnects at
/// restart (during Refill, behind a resume gate).
pub struct SharedLink {
    rank: u32,
    peer: String,
    resource: String,
    st: Arc<Mutex<LinkState>>,
}

impl SharedLink {
    pub const NAME: &'static str = "shared-link";
    pub const DEFAULT_RESOURCE: &'static str = "emu-bus";
    const RETRY: Duration = Duration::from_millis(50);

    pub fn new(rank: u32, peer: &str, resource: &str) -> Self {
        Self {
            rank,
            peer: peer.to_string(),
            resource: resource.to_string(),
            st: Arc::new(Mutex::new(LinkState::default())),
        }
    }

    pub fn handle(&self) -> Option<u64> {
        self.st.lock().unwrap_or_else(|e| e.into_inner()).handle
    }
}

impl Plugin for SharedLink {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn optional(&self) -> bool {
        true
    }

    fn resources(&self) -> Vec<String> {
        vec![self.resource.clone()]
    }

    fn on_launch(&self, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        let event = Event::Custom("launch".into());
        let rt = &ctx.env.runtime;
        let h = rt
            .connect(&self.peer)
            .and_then(|h| rt.classify_connection(h, ConnClass::External).map(|_| h))
            .map_err(|e| PluginError::hook(Self::NAME, &event, e))?;
        self.st.lock().unwrap_or_else(|e| e.into_inner()).handle = Some(h);
        Ok(())
    }

    fn on_event(&self, event: &Event, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        if *event != Event::Refill || ctx.restart.is_none() {
            return Ok(());
        }
        let Some(peer) = self.st.lock().unwrap_or_else(|e| e.into_inner()).restore.clone() else {
            return Ok(());
        };
        let rt = ctx.env.runtime.clone();
        let st = self.st.clone();
        ctx.env.control.add_gate(Self::NAME, move || {
            let mut st = st.lock().unwrap_or_else(|e| e.into_inner());
            if st.handle.is_some() {
                return true;
            }
            if st.last_try.is_some_and(|t| t.elapsed() < Self::RETRY) {
                return false;
            }
            st.last_try = Some(Instant::now());
            match rt.connect(&peer) {
                Ok(h) => {
                    let _ = rt.classify_connection(h, ConnClass::External);
                    st.handle = Some(h);
                    true
                }
                Err(e) => {
                    log::debug!("shared link reconnect to {peer} failed: {e}");
                    false
                }
            }
        });
        Ok(())
    }

    fn save(&self, ctx: &EventCtx<'_>) -> Result<Option<Vec<u8>>, PluginError> {
        if ctx.is_leader(&self.resource) {
            Ok(Some(self.peer.clone().into_bytes()))
        } else {
            Ok(None)
        }
    }

    fn load(&self, blob: &[u8], _ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        let peer = String::from_utf8(blob.to_vec()).map_err(|e| PluginError::codec(Self::NAME, e))?;
        self.st.lock().unwrap_or_else(|e| e.into_inner()).restore = Some(peer);
        Ok(())
    }

    fn spec_line(&self) -> String {
        format!(
            "plugin {} rank {} peer={} resource={}",
            Self::NAME,
            self.rank,
            self.peer,
            self.resource
        )
    }
}
