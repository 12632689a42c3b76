use std::collections::BTreeMap;
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use super::wire::{read_msg, write_msg, Msg};
use crate::plugin::Side;
use crate::process::{BarrierDriver, BeginInfo, DriverError, Lifecycle};

enum Incoming {
    Msg(Msg),
    Closed(String),
}

/// Severs a worker's coordinator connection from another thread.
#[derive(Debug)]
pub struct LinkKiller(TcpStream);

impl LinkKiller {
    pub fn kill(&self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

/// Drives lifecycles in lockstep with other workers through a coordinator.
pub struct WorkerLink {
    stream: TcpStream,
    rx: Receiver<Incoming>,
    worker: u64,
    timeout: Duration,
    pending: Option<u64>,
    leaders: BTreeMap<String, u64>,
    declared_resources: bool,
    peer_aborted: bool,
}

impl WorkerLink {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    /// Registers with the coordinator at `addr`. `worker` 0 asks for a fresh
    /// id; `world` is the number of workers restarting together, 0 at launch.
    pub fn connect(addr: &str, worker: u64, world: u64) -> Result<Self, DriverError> {
        let io = |e: std::io::Error| DriverError::Io(format!("{addr}: {e}"));
        let stream = TcpStream::connect(addr).map_err(io)?;
        let _ = stream.set_nodelay(true);
        let mut reader = stream.try_clone().map_err(io)?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || loop {
            match read_msg(&mut reader) {
                Ok(Some(m)) => {
                    if tx.send(Incoming::Msg(m)).is_err() {
                        break;
                    }
                }
                Ok(None) => {
                    let _ = tx.send(Incoming::Closed("coordinator closed the connection".into()));
                    break;
                }
                Err(e) => {
                    let _ = tx.send(Incoming::Closed(e.to_string()));
                    break;
                }
            }
        });
        let mut link = Self {
            stream,
            rx,
            worker: 0,
            timeout: Self::DEFAULT_TIMEOUT,
            pending: None,
            leaders: BTreeMap::new(),
            declared_resources: false,
            peer_aborted: false,
        };
        link.send(&Msg::Register { worker, world })?;
        match link.next()? {
            Msg::Register { worker, .. } => link.worker = worker,
            Msg::Error { msg } => return Err(DriverError::Protocol(msg)),
            other => return Err(unexpected(&other)),
        }
        Ok(link)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn worker_id(&self) -> u64 {
        self.worker
    }

    pub fn killer(&self) -> Result<LinkKiller, DriverError> {
        self.stream
            .try_clone()
            .map(LinkKiller)
            .map_err(|e| DriverError::Io(e.to_string()))
    }

    fn send(&mut self, msg: &Msg) -> Result<(), DriverError> {
        write_msg(&mut self.stream, msg).map_err(|e| DriverError::Io(e.to_string()))
    }

    fn next(&mut self) -> Result<Msg, DriverError> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(Incoming::Msg(m)) => Ok(m),
            Ok(Incoming::Closed(why)) => Err(DriverError::Io(why)),
            Err(RecvTimeoutError::Timeout) => Err(DriverError::Io(format!(
                "no reply from the coordinator within {:?}",
                self.timeout
            ))),
            Err(RecvTimeoutError::Disconnected) => Err(DriverError::Io("coordinator link closed".into())),
        }
    }

    /// Next message, with aborts, errors and leader notices handled.
    fn next_relevant(&mut self) -> Result<Msg, DriverError> {
        loop {
            match self.next()? {
                Msg::Abort { reason } => {
                    self.peer_aborted = true;
                    return Err(DriverError::Aborted(reason));
                }
                Msg::Error { msg } => return Err(DriverError::Protocol(msg)),
                Msg::Leader { resource, worker } => {
                    self.leaders.insert(resource, worker);
                }
                Msg::Suspend { lifecycle } => self.pending = Some(lifecycle),
                Msg::Done { .. } => {}
                other => return Ok(other),
            }
        }
    }
}

fn unexpected(m: &Msg) -> DriverError {
    DriverError::Protocol(format!("unexpected message type {}", m.code()))
}

impl BarrierDriver for WorkerLink {
    fn poll(&mut self) -> bool {
        while let Ok(m) = self.rx.try_recv() {
            match m {
                Incoming::Msg(Msg::Suspend { lifecycle }) => self.pending = Some(lifecycle),
                Incoming::Msg(other) => log::debug!("worker {}: ignoring message type {}", self.worker, other.code()),
                Incoming::Closed(why) => {
                    log::warn!("worker {}: coordinator link lost: {why}", self.worker);
                    break;
                }
            }
        }
        self.pending.is_some()
    }

    fn begin(&mut self, info: BeginInfo<'_>) -> Result<Lifecycle, DriverError> {
        self.leaders.clear();
        self.peer_aborted = false;
        if info.side == Side::Checkpoint && self.pending.is_none() {
            self.send(&Msg::Request)?;
            while self.pending.is_none() {
                match self.next()? {
                    Msg::Suspend { lifecycle } => self.pending = Some(lifecycle),
                    Msg::Abort { reason } => return Err(DriverError::Aborted(reason)),
                    Msg::Error { msg } => return Err(DriverError::Protocol(msg)),
                    Msg::Done { .. } => {}
                    other => return Err(unexpected(&other)),
                }
            }
        }
        self.pending = None;
        if !self.declared_resources && !info.resources.is_empty() {
            self.send(&Msg::DeclareResource {
                names: info.resources.iter().cloned().collect(),
            })?;
            self.declared_resources = true;
        }
        let names = info.local.names();
        self.send(&Msg::DeclareBarrier {
            side: info.side.code(),
            lifecycle: 0,
            names: names.clone(),
            image_hash: info.image_hash.unwrap_or(0),
            world: 0,
        })?;
        if info.side == Side::Checkpoint {
            for r in info.resources {
                self.send(&Msg::Elect { resource: r.clone() })?;
            }
        }
        match self.next_relevant()? {
            Msg::DeclareBarrier {
                lifecycle,
                names: agreed,
                world,
                ..
            } => {
                if agreed != names {
                    return Err(DriverError::ScheduleMismatch(format!(
                        "local {} agreed {}",
                        names.join(","),
                        agreed.join(",")
                    )));
                }
                Ok(Lifecycle {
                    id: lifecycle,
                    schedule: info.local.clone(),
                    worker_id: self.worker,
                    world,
                })
            }
            other => Err(unexpected(&other)),
        }
    }

    fn arrive(&mut self, barrier: &str) -> Result<(), DriverError> {
        self.send(&Msg::Arrived {
            name: barrier.to_string(),
        })?;
        match self.next_relevant()? {
            Msg::Release { name } if name == barrier => Ok(()),
            other => Err(unexpected(&other)),
        }
    }

    fn leaders(&self) -> BTreeMap<String, u64> {
        self.leaders.clone()
    }

    fn fail(&mut self, reason: &str) {
        self.pending = None;
        if self.peer_aborted {
            return;
        }
        if let Err(e) = self.send(&Msg::Abort {
            reason: reason.to_string(),
        }) {
            log::warn!("worker {}: could not report abort: {e}", self.worker);
        }
    }

    fn finish(&mut self, result: &str) {
        if let Err(e) = self.send(&Msg::Done {
            text: result.to_string(),
        }) {
            log::warn!("worker {}: could not report completion: {e}", self.worker);
        }
    }
}

impl Drop for WorkerLink {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}
