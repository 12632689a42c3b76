use std::sync::{Arc, RwLock};

use crate::call::{Call, CallError, CallName, CallTarget, Reply};
use crate::plugin::CkptControl;

use super::VirtError;

/// One interposition layer around a runtime call. A wrapper may rewrite the
/// call before handing it to `next` and rewrite the reply on the way back.
pub trait Wrapper: Send + Sync {
    fn call(&self, call: Call, next: Next<'_>) -> Result<Reply, CallError>;
}

impl<F> Wrapper for F
where
    F: Fn(Call, Next<'_>) -> Result<Reply, CallError> + Send + Sync,
{
    fn call(&self, call: Call, next: Next<'_>) -> Result<Reply, CallError> {
        self(call, next)
    }
}

/// The rest of the stack below the current wrapper.
pub struct Next<'a> {
    chain: &'a [Arc<dyn Wrapper>],
    bottom: &'a dyn CallTarget,
    control: Option<&'a CkptControl>,
}

impl Next<'_> {
    pub fn call(self, call: Call) -> Result<Reply, CallError> {
        match self.chain.split_first() {
            None => self.bottom.execute(call),
            Some((wrapper, rest)) => {
                // Wrapper bodies run with checkpointing disabled.
                if let Some(c) = self.control {
                    c.disable();
                }
                let out = wrapper.call(
                    call,
                    Next {
                        chain: rest,
                        bottom: self.bottom,
                        control: self.control,
                    },
                );
                if let Some(c) = self.control {
                    let _ = c.enable();
                }
                out
            }
        }
    }
}

struct Layer {
    rank: u32,
    plugin: String,
    call: CallName,
    wrapper: Arc<dyn Wrapper>,
}

/// Wrappers ordered by rank. Calls enter at the highest rank and travel down
/// to rank 0, which is the runtime itself.
pub struct LayerStack {
    layers: RwLock<Vec<Layer>>,
    bottom: Arc<dyn CallTarget>,
    control: Option<Arc<CkptControl>>,
}

impl LayerStack {
    pub fn new(bottom: Arc<dyn CallTarget>, control: Option<Arc<CkptControl>>) -> Self {
        Self {
            layers: RwLock::new(Vec::new()),
            bottom,
            control,
        }
    }

    pub fn install_wrapper(
        &self,
        rank: u32,
        call: &str,
        plugin: &str,
        wrapper: Arc<dyn Wrapper>,
    ) -> Result<(), CallError> {
        let call: CallName = call.parse()?;
        self.install(rank, call, plugin, wrapper)
            .map_err(CallError::Virt)
    }

    pub fn install(
        &self,
        rank: u32,
        call: CallName,
        plugin: &str,
        wrapper: Arc<dyn Wrapper>,
    ) -> Result<(), VirtError> {
        if rank == 0 {
            return Err(VirtError::ReservedRank);
        }
        let mut layers = self.layers.write().unwrap_or_else(|e| e.into_inner());
        if layers.iter().any(|l| l.call == call && l.rank == rank) {
            return Err(VirtError::DuplicateLayer { rank, call: call.to_string() });
        }
        let at = layers.iter().position(|l| l.rank < rank).unwrap_or(layers.len());
        layers.insert(
            at,
            Layer {
                rank,
                plugin: plugin.to_string(),
                call,
                wrapper,
            },
        );
        Ok(())
    }

    /// `(rank, plugin)` for every wrapper of `call`, in traversal order.
    pub fn layers(&self, call: CallName) -> Vec<(u32, String)> {
        self.layers
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|l| l.call == call)
            .map(|l| (l.rank, l.plugin.clone()))
            .collect()
    }

    pub fn dispatch(&self, call: Call) -> Result<Reply, CallError> {
        let chain: Vec<Arc<dyn Wrapper>> = self
            .layers
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|l| l.call == call.name())
            .map(|l| l.wrapper.clone())
            .collect();
        Next {
            chain: &chain,
            bottom: self.bottom.as_ref(),
            control: self.control.as_deref(),
        }
        .call(call)
    }
}

impl CallTarget for LayerStack {
    fn execute(&self, call: Call) -> Result<Reply, CallError> {
        self.dispatch(call)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Runtime;
    use std::collections::BTreeMap;
    use std::sync::Mutex;

    fn runtime() -> Arc<Runtime> {
        Arc::new(Runtime::with_env(0, BTreeMap::from([("K".into(), "v".into())])))
    }

    #[test]
    fn empty_stack_is_the_runtime() {
        let rt = runtime();
        let stack = LayerStack::new(rt.clone(), None);
        assert_eq!(stack.dispatch(Call::Spawn { entry: "x".into() }).unwrap(), Reply::Tid(1));
        assert_eq!(
            stack.dispatch(Call::Getenv { key: "K".into() }).unwrap(),
            Reply::Env(Some("v".into()))
        );
        assert_eq!(
            stack.dispatch(Call::Kill { tid: 99, sig: 1 }),
            Err(CallError::UnknownTid(99))
        );
    }

    #[test]
    fn wrappers_run_in_descending_rank() {
        let rt = runtime();
        let stack = LayerStack::new(rt.clone(), None);
        let tagger = |tag: &'static str| -> Arc<dyn Wrapper> {
            Arc::new(move |call: Call, next: Next<'_>| match call {
                Call::OpenPath { path } => next.call(Call::OpenPath { path: format!("{path}-{tag}") }),
                other => next.call(other),
            })
        };
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let probe: Arc<dyn Wrapper> = Arc::new(move |call: Call, next: Next<'_>| {
            if let Call::OpenPath { path } = &call {
                seen2.lock().unwrap().push(path.clone());
            }
            next.call(Call::OpenPath { path: "/dev/null".into() })
        });
        stack.install_wrapper(1, "open_path", "r1", tagger("rank1")).unwrap();
        stack.install_wrapper(2, "open_path", "r2", tagger("rank2")).unwrap();
        stack.install_wrapper(3, "open_path", "r3", tagger("rank3")).unwrap();
        let low = LayerStack::new(rt.clone(), None);
        low.install(1, CallName::OpenPath, "probe", probe).unwrap();
        low.install(2, CallName::OpenPath, "a", tagger("rank2")).unwrap();
        low.install(3, CallName::OpenPath, "b", tagger("rank3")).unwrap();
        low.dispatch(Call::OpenPath { path: "f".into() }).unwrap();
        assert_eq!(seen.lock().unwrap().as_slice(), ["f-rank3-rank2"]);
        assert_eq!(
            stack.layers(CallName::OpenPath).iter().map(|l| l.0).collect::<Vec<_>>(),
            vec![3, 2, 1]
        );
    }

    #[test]
    fn install_errors() {
        let stack = LayerStack::new(runtime(), None);
        let w: Arc<dyn Wrapper> = Arc::new(|c: Call, n: Next<'_>| n.call(c));
        assert_eq!(
            stack.install_wrapper(1, "fork", "p", w.clone()),
            Err(CallError::UnknownCall("fork".into()))
        );
        assert!(stack.install_wrapper(0, "kill_task", "p", w.clone()).is_err());
        stack.install_wrapper(4, "kill_task", "p", w.clone()).unwrap();
        assert!(stack.install_wrapper(4, "kill_task", "q", w.clone()).is_err());
        stack.install_wrapper(4, "lock", "p", w).unwrap();
    }

    #[test]
    fn wrapper_bodies_disable_checkpointing() {
        let control = Arc::new(CkptControl::new());
        let stack = LayerStack::new(runtime(), Some(control.clone()));
        let c2 = control.clone();
        let depth = Arc::new(Mutex::new(None));
        let d2 = depth.clone();
        stack
            .install(
                5,
                CallName::Getenv,
                "p",
                Arc::new(move |c: Call, n: Next<'_>| {
                    *d2.lock().unwrap() = Some(c2.depth());
                    n.call(c)
                }),
            )
            .unwrap();
        stack.dispatch(Call::Getenv { key: "K".into() }).unwrap();
        assert_eq!(*depth.lock().unwrap(), Some(1));
        assert_eq!(control.depth(), 0);
    }
}
