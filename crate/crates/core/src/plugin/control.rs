use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use thiserror::Error;

pub const GATE_POLL_INTERVAL: Duration = Duration::from_millis(10);
pub const DEFAULT_GATE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControlError {
    #[error("enable without a matching disable")]
    Underflow,
    #[error("resume gate `{0}` did not open in time")]
    GateTimeout(String),
    #[error("checkpointing stayed disabled past the deadline")]
    DisabledTimeout,
}

/// Identifies a checkpoint request. Requests made while one is pending
/// coalesce into the pending ticket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket(pub u64);

type Gate = Arc<dyn Fn() -> bool + Send + Sync>;

#[derive(Default)]
struct Inner {
    depth: u64,
    next_ticket: u64,
    pending: Option<Ticket>,
    done: BTreeMap<Ticket, Result<String, String>>,
    gates: Vec<(String, Gate)>,
}

/// Per-process checkpoint control: the disable/enable depth counter,
/// pending requests and resume gates.
#[derive(Default)]
pub struct CkptControl {
    inner: Mutex<Inner>,
    cond: Condvar,
}

impl CkptControl {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn disable(&self) {
        self.lock().depth += 1;
    }

    pub fn enable(&self) -> Result<(), ControlError> {
        let mut g = self.lock();
        if g.depth == 0 {
            return Err(ControlError::Underflow);
        }
        g.depth -= 1;
        if g.depth == 0 {
            self.cond.notify_all();
        }
        Ok(())
    }

    pub fn depth(&self) -> u64 {
        self.lock().depth
    }

    pub fn is_enabled(&self) -> bool {
        self.depth() == 0
    }

    pub fn request(&self) -> Ticket {
        let mut g = self.lock();
        if let Some(t) = g.pending {
            return t;
        }
        g.next_ticket += 1;
        let t = Ticket(g.next_ticket);
        g.pending = Some(t);
        t
    }

    pub fn pending(&self) -> Option<Ticket> {
        self.lock().pending
    }

    /// Hands out the pending request if checkpointing is currently enabled.
    pub fn take_ready(&self) -> Option<Ticket> {
        let mut g = self.lock();
        if g.depth == 0 {
            g.pending.take()
        } else {
            None
        }
    }

    /// Blocks until the depth counter reaches zero.
    pub fn wait_enabled(&self, timeout: Duration) -> Result<(), ControlError> {
        let g = self.lock();
        let (g, res) = self
            .cond
            .wait_timeout_while(g, timeout, |i| i.depth > 0)
            .unwrap_or_else(|e| e.into_inner());
        drop(g);
        if res.timed_out() {
            Err(ControlError::DisabledTimeout)
        } else {
            Ok(())
        }
    }

    pub fn complete(&self, ticket: Ticket, result: Result<String, String>) {
        self.lock().done.insert(ticket, result);
        self.cond.notify_all();
    }

    pub fn result(&self, ticket: Ticket) -> Option<Result<String, String>> {
        self.lock().done.get(&ticket).cloned()
    }

    pub fn add_gate(&self, name: &str, gate: impl Fn() -> bool + Send + Sync + 'static) {
        self.lock().gates.push((name.to_string(), Arc::new(gate)));
    }

    pub fn clear_gates(&self) {
        self.lock().gates.clear();
    }

    /// Polls every registered gate until all are open or `timeout` passes.
    pub fn wait_gates(&self, timeout: Duration) -> Result<(), ControlError> {
        let gates = self.lock().gates.clone();
        let mut waited = Duration::ZERO;
        for (name, gate) in gates {
            loop {
                if gate() {
                    break;
                }
                if waited >= timeout {
                    return Err(ControlError::GateTimeout(name));
                }
                std::thread::sleep(GATE_POLL_INTERVAL);
                waited += GATE_POLL_INTERVAL;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn depth_and_underflow() {
        let c = CkptControl::new();
        assert_eq!(c.enable(), Err(ControlError::Underflow));
        c.disable();
        c.disable();
        assert_eq!(c.depth(), 2);
        c.enable().unwrap();
        assert!(!c.is_enabled());
        c.enable().unwrap();
        assert!(c.is_enabled());
    }

    #[test]
    fn requests_coalesce_and_wait_for_enable() {
        let c = CkptControl::new();
        c.disable();
        let a = c.request();
        let b = c.request();
        assert_eq!(a, b);
        assert_eq!(c.take_ready(), None);
        c.enable().unwrap();
        assert_eq!(c.take_ready(), Some(a));
        assert_ne!(c.request(), a);
    }

    #[test]
    fn gates_are_polled() {
        let c = CkptControl::new();
        let n = Arc::new(AtomicU32::new(0));
        let n2 = n.clone();
        c.add_gate("third-poll", move || n2.fetch_add(1, Ordering::SeqCst) >= 2);
        c.wait_gates(Duration::from_secs(1)).unwrap();
        assert_eq!(n.load(Ordering::SeqCst), 3);
        c.add_gate("never", || false);
        assert_eq!(
            c.wait_gates(Duration::from_millis(30)),
            Err(ControlError::GateTimeout("never".into()))
        );
    }

    #[test]
    fn wait_enabled_times_out_while_disabled() {
        let c = CkptControl::new();
        c.disable();
        assert_eq!(c.wait_enabled(Duration::from_millis(20)), Err(ControlError::DisabledTimeout));
        c.enable().unwrap();
        c.wait_enabled(Duration::from_millis(20)).unwrap();
    }
}
