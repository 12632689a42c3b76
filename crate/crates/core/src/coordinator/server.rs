use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::wire::{read_msg, write_msg, Msg};
use crate::plugin::Side;

type ConnId = u64;

/// One entry of the coordinator's event log. `seq` orders all entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordEvent {
    pub seq: u64,
    pub nanos: u64,
    pub lifecycle: Option<u64>,
    pub worker: Option<u64>,
    pub what: String,
}

enum Ev {
    Open(ConnId, TcpStream),
    Msg(ConnId, Msg),
    Closed(ConnId),
    Roster(Sender<Vec<String>>),
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum WState {
    Running,
    Suspending,
    AtBarrier(String),
    Restoring,
}

impl std::fmt::Display for WState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WState::Running => f.write_str("running"),
            WState::Suspending => f.write_str("suspending"),
            WState::AtBarrier(b) => write!(f, "at-barrier {b}"),
            WState::Restoring => f.write_str("restoring"),
        }
    }
}

struct Worker {
    conn: ConnId,
    state: WState,
    resources: BTreeSet<String>,
    world: u64,
}

struct Lc {
    id: u64,
    side: Side,
    world: u64,
    members: BTreeSet<u64>,
    declared: BTreeMap<u64, (Vec<String>, u64)>,
    schedule: Option<Vec<String>>,
    step: usize,
    arrived: BTreeSet<u64>,
    candidates: BTreeMap<String, BTreeSet<u64>>,
    done: BTreeMap<u64, String>,
}

struct State {
    conns: BTreeMap<ConnId, TcpStream>,
    workers: BTreeMap<u64, Worker>,
    by_conn: BTreeMap<ConnId, u64>,
    next_id: u64,
    next_lc: u64,
    lc: Option<Lc>,
    waiters: Vec<ConnId>,
    log: Arc<Mutex<Vec<CoordEvent>>>,
}

impl State {
    fn note(&self, worker: Option<u64>, what: String) {
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        let seq = log.len() as u64;
        log::debug!("coordinator: {what}");
        log.push(CoordEvent {
            seq,
            nanos: crate::clock::monotonic_nanos(),
            lifecycle: self.lc.as_ref().map(|l| l.id),
            worker,
            what,
        });
    }

    fn send(&mut self, conn: ConnId, msg: &Msg) {
        if let Some(s) = self.conns.get_mut(&conn) {
            if let Err(e) = write_msg(s, msg) {
                log::debug!("coordinator: send to connection {conn} failed: {e}");
            }
        }
    }

    fn send_worker(&mut self, worker: u64, msg: &Msg) {
        if let Some(conn) = self.workers.get(&worker).map(|w| w.conn) {
            self.send(conn, msg);
        }
    }

    fn roster(&self) -> Vec<String> {
        self.workers
            .iter()
            .map(|(id, w)| format!("worker {id} {}", w.state))
            .collect()
    }

    fn set_state(&mut self, ids: &BTreeSet<u64>, state: WState) {
        for id in ids {
            if let Some(w) = self.workers.get_mut(id) {
                w.state = state.clone();
            }
        }
    }

    fn abort(&mut self, origin: Option<u64>, reason: &str) {
        let Some(lc) = self.lc.take() else { return };
        self.note(origin, format!("abort lifecycle {}: {reason}", lc.id));
        let msg = Msg::Abort {
            reason: reason.to_string(),
        };
        for &w in lc.members.iter().chain(lc.declared.keys()) {
            if Some(w) != origin {
                self.send_worker(w, &msg);
            }
        }
        for conn in std::mem::take(&mut self.waiters) {
            self.send(conn, &msg);
        }
        let ids: BTreeSet<u64> = lc.members.union(&lc.declared.keys().copied().collect()).copied().collect();
        self.set_state(&ids, WState::Running);
    }

    fn on_msg(&mut self, conn: ConnId, msg: Msg) {
        let worker = self.by_conn.get(&conn).copied();
        match msg {
            Msg::Register { worker: want, world } => self.register(conn, want, world),
            Msg::Status { .. } => {
                let text = self.roster().join("\n");
                self.send(conn, &Msg::Status { text });
            }
            Msg::Request => self.request(conn),
            other => match worker {
                None => self.send(
                    conn,
                    &Msg::Error {
                        msg: "not registered".into(),
                    },
                ),
                Some(w) => self.worker_msg(w, conn, other),
            },
        }
    }

    fn register(&mut self, conn: ConnId, want: u64, world: u64) {
        if self.by_conn.contains_key(&conn) {
            self.note(None, format!("duplicate registration on connection {conn}"));
            self.send(
                conn,
                &Msg::Error {
                    msg: "duplicate registration on this connection".into(),
                },
            );
            return;
        }
        let id = if want == 0 { self.next_id } else { want };
        if self.workers.contains_key(&id) {
            self.send(
                conn,
                &Msg::Error {
                    msg: format!("worker id {id} is already registered"),
                },
            );
            return;
        }
        self.next_id = self.next_id.max(id + 1);
        let state = if world > 0 { WState::Restoring } else { WState::Running };
        self.workers.insert(
            id,
            Worker {
                conn,
                state,
                resources: BTreeSet::new(),
                world,
            },
        );
        self.by_conn.insert(conn, id);
        self.note(Some(id), format!("register worker {id}"));
        self.send(conn, &Msg::Register { worker: id, world });
    }

    fn request(&mut self, conn: ConnId) {
        if self.lc.is_some() {
            self.waiters.push(conn);
            return;
        }
        let members: BTreeSet<u64> = self
            .workers
            .iter()
            .filter(|(_, w)| w.state == WState::Running)
            .map(|(&id, _)| id)
            .collect();
        if members.is_empty() {
            self.send(
                conn,
                &Msg::Error {
                    msg: "no running workers".into(),
                },
            );
            return;
        }
        let id = self.next_lc;
        self.next_lc += 1;
        self.lc = Some(Lc {
            id,
            side: Side::Checkpoint,
            world: members.len() as u64,
            members: members.clone(),
            declared: BTreeMap::new(),
            schedule: None,
            step: 0,
            arrived: BTreeSet::new(),
            candidates: BTreeMap::new(),
            done: BTreeMap::new(),
        });
        self.waiters.push(conn);
        self.note(None, format!("suspend lifecycle {id} workers {}", members.len()));
        self.set_state(&members, WState::Suspending);
        for w in members {
            self.send_worker(w, &Msg::Suspend { lifecycle: id });
        }
    }

    fn protocol_error(&mut self, w: u64, msg: String) {
        self.note(Some(w), format!("protocol error: {msg}"));
        self.send_worker(w, &Msg::Error { msg: msg.clone() });
        self.abort(None, &msg);
    }

    fn worker_msg(&mut self, w: u64, _conn: ConnId, msg: Msg) {
        match msg {
            Msg::DeclareResource { names } => {
                if let Some(rec) = self.workers.get_mut(&w) {
                    rec.resources.extend(names);
                }
            }
            Msg::DeclareBarrier {
                side,
                names,
                image_hash,
                ..
            } => self.declare(w, side, names, image_hash),
            Msg::Elect { resource } => match self.lc.as_mut() {
                Some(lc) => {
                    lc.candidates.entry(resource).or_default().insert(w);
                }
                None => self.send_worker(
                    w,
                    &Msg::Error {
                        msg: "no lifecycle in progress".into(),
                    },
                ),
            },
            Msg::Arrived { name } => self.arrived(w, name),
            Msg::Done { text } => self.done(w, text),
            Msg::Abort { reason } => {
                if self.lc.as_ref().is_some_and(|l| l.members.contains(&w) || l.declared.contains_key(&w)) {
                    self.abort(Some(w), &format!("worker {w} failed: {reason}"));
                }
            }
            other => self.send_worker(
                w,
                &Msg::Error {
                    msg: format!("unexpected message type {}", other.code()),
                },
            ),
        }
    }

    fn declare(&mut self, w: u64, side: u8, names: Vec<String>, image_hash: u64) {
        let Some(side) = Side::from_code(side) else {
            return self.protocol_error(w, format!("unknown lifecycle side {side}"));
        };
        if self.lc.is_none() && side == Side::Restart {
            let world = self.workers.get(&w).map_or(1, |r| r.world.max(1));
            let id = self.next_lc;
            self.next_lc += 1;
            self.lc = Some(Lc {
                id,
                side,
                world,
                members: BTreeSet::new(),
                declared: BTreeMap::new(),
                schedule: None,
                step: 0,
                arrived: BTreeSet::new(),
                candidates: BTreeMap::new(),
                done: BTreeMap::new(),
            });
            self.note(Some(w), format!("restart lifecycle {id} expecting {world} workers"));
        }
        let Some(lc) = self.lc.as_mut() else {
            return self.send_worker(
                w,
                &Msg::Error {
                    msg: "no checkpoint was requested".into(),
                },
            );
        };
        if lc.side != side || lc.schedule.is_some() || (side == Side::Checkpoint && !lc.members.contains(&w)) {
            return self.send_worker(
                w,
                &Msg::Error {
                    msg: "cannot join the lifecycle in progress".into(),
                },
            );
        }
        if side == Side::Restart {
            lc.members.insert(w);
        }
        lc.declared.insert(w, (names, image_hash));
        let ready = match side {
            Side::Checkpoint => lc.declared.len() == lc.members.len(),
            Side::Restart => lc.declared.len() as u64 >= lc.world,
        };
        if !ready {
            return;
        }
        let (first_names, first_hash) = lc.declared.values().next().cloned().unwrap_or_default();
        if lc.declared.values().any(|(n, _)| *n != first_names) {
            return self.abort(None, "barrier schedule mismatch between workers");
        }
        if side == Side::Restart && lc.declared.values().any(|(_, h)| *h != first_hash) {
            return self.abort(None, "image schedule-hash mismatch: images come from different lifecycles");
        }
        lc.schedule = Some(first_names.clone());
        let (id, members, world) = (lc.id, lc.members.clone(), lc.members.len() as u64);
        self.note(None, format!("schedule {}", first_names.join(",")));
        let reply = Msg::DeclareBarrier {
            side: side.code(),
            lifecycle: id,
            names: first_names,
            image_hash: first_hash,
            world,
        };
        for m in members {
            self.send_worker(m, &reply);
        }
    }

    fn arrived(&mut self, w: u64, name: String) {
        let expected = self
            .lc
            .as_ref()
            .and_then(|lc| lc.schedule.as_ref().map(|s| (s.get(lc.step).cloned(), lc.members.contains(&w))));
        match expected {
            Some((Some(exp), true)) if exp == name => {}
            Some((exp, _)) => {
                return self.protocol_error(w, format!("arrival at `{name}`, expected {exp:?}"));
            }
            None => {
                return self.send_worker(
                    w,
                    &Msg::Error {
                        msg: "no lifecycle in progress".into(),
                    },
                )
            }
        }
        if let Some(rec) = self.workers.get_mut(&w) {
            rec.state = WState::AtBarrier(name.clone());
        }
        self.note(Some(w), format!("arrive {w} {name}"));
        let lc = self.lc.as_mut().unwrap_or_else(|| unreachable!("checked above"));
        lc.arrived.insert(w);
        if lc.arrived != lc.members {
            return;
        }
        let members = lc.members.clone();
        if lc.step == 0 && lc.side == Side::Checkpoint {
            let picks: Vec<(String, u64, BTreeSet<u64>)> = lc
                .candidates
                .iter()
                .filter_map(|(r, c)| c.iter().next().map(|&l| (r.clone(), l, c.clone())))
                .collect();
            for (resource, leader, cands) in picks {
                self.note(Some(leader), format!("leader {resource} {leader}"));
                let msg = Msg::Leader {
                    resource: resource.clone(),
                    worker: leader,
                };
                for c in cands {
                    self.send_worker(c, &msg);
                }
            }
        }
        let lc = self.lc.as_mut().unwrap_or_else(|| unreachable!("checked above"));
        lc.step += 1;
        lc.arrived.clear();
        self.note(None, format!("release {name}"));
        let msg = Msg::Release { name };
        for m in members {
            self.send_worker(m, &msg);
        }
    }

    fn done(&mut self, w: u64, text: String) {
        let Some(lc) = self.lc.as_mut() else { return };
        let finished = lc.schedule.as_ref().is_some_and(|s| lc.step == s.len());
        if !finished || !lc.members.contains(&w) {
            return self.protocol_error(w, "completion before the last barrier".into());
        }
        lc.done.insert(w, text);
        if lc.done.len() != lc.members.len() {
            return;
        }
        let lc = self.lc.take().unwrap_or_else(|| unreachable!("checked above"));
        let text: String = lc
            .done
            .iter()
            .map(|(id, t)| format!("worker {id} {t}\n"))
            .collect();
        self.set_state(&lc.members, WState::Running);
        self.note(None, format!("complete lifecycle {}", lc.id));
        for conn in std::mem::take(&mut self.waiters) {
            self.send(conn, &Msg::Done { text: text.clone() });
        }
    }

    fn closed(&mut self, conn: ConnId) {
        if let Some(s) = self.conns.remove(&conn) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        self.waiters.retain(|&c| c != conn);
        let Some(w) = self.by_conn.remove(&conn) else { return };
        self.workers.remove(&w);
        self.note(Some(w), format!("worker {w} disconnected"));
        if self
            .lc
            .as_ref()
            .is_some_and(|l| l.members.contains(&w) || l.declared.contains_key(&w))
        {
            self.abort(Some(w), &format!("worker {w} disconnected"));
        }
    }
}

/// The barrier coordinator. Connections are served concurrently; every
/// event goes through one state-machine thread.
pub struct Coordinator {
    addr: SocketAddr,
    tx: Sender<Ev>,
    log: Arc<Mutex<Vec<CoordEvent>>>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Coordinator {
    pub fn serve(addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let log = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let state = State {
            conns: BTreeMap::new(),
            workers: BTreeMap::new(),
            by_conn: BTreeMap::new(),
            next_id: 1,
            next_lc: 1,
            lc: None,
            waiters: Vec::new(),
            log: log.clone(),
        };
        let machine = std::thread::spawn(move || run_machine(state, rx));
        let accept_tx = tx.clone();
        let accept_stop = stop.clone();
        let accept = std::thread::spawn(move || {
            let mut next: ConnId = 1;
            for stream in listener.incoming() {
                if accept_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                let (Ok(reader), Ok(writer)) = (stream.try_clone(), stream.try_clone()) else {
                    continue;
                };
                let id = next;
                next += 1;
                if accept_tx.send(Ev::Open(id, writer)).is_err() {
                    break;
                }
                let tx = accept_tx.clone();
                std::thread::spawn(move || {
                    let mut reader = reader;
                    loop {
                        match read_msg(&mut reader) {
                            Ok(Some(m)) => {
                                if tx.send(Ev::Msg(id, m)).is_err() {
                                    break;
                                }
                            }
                            Ok(None) | Err(_) => {
                                let _ = tx.send(Ev::Closed(id));
                                break;
                            }
                        }
                    }
                });
            }
        });
        Ok(Self {
            addr,
            tx,
            log,
            stop,
            threads: vec![machine, accept],
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `worker N STATE` lines, by worker id.
    pub fn roster(&self) -> Vec<String> {
        let (tx, rx) = mpsc::channel();
        if self.tx.send(Ev::Roster(tx)).is_err() {
            return Vec::new();
        }
        rx.recv().unwrap_or_default()
    }

    pub fn log(&self) -> Vec<CoordEvent> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Blocks until the coordinator is shut down from another thread.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.tx.send(Ev::Stop);
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Coordinator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run_machine(mut st: State, rx: Receiver<Ev>) {
    while let Ok(ev) = rx.recv() {
        match ev {
            Ev::Open(id, stream) => {
                st.conns.insert(id, stream);
            }
            Ev::Msg(id, m) => st.on_msg(id, m),
            Ev::Closed(id) => st.closed(id),
            Ev::Roster(reply) => {
                let _ = reply.send(st.roster());
            }
            Ev::Stop => break,
        }
    }
    for (_, s) in std::mem::take(&mut st.conns) {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
}
