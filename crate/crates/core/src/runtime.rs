//! The sandboxed host runtime: tasks, error-checking locks, the connection
//! registry, open files, the environment and the emulator device. Everything
//! here speaks real ids only.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use thiserror::Error;

use crate::call::{Call, CallError, CallName, CallTarget, ClockStep, Reply, StepReply};
use crate::emulator::{Bits, EmulatorState, Netlist, RegisterBank, SimError};

/// Real ids are `incarnation * ID_STRIDE + seq` with `seq` starting at 1, so
/// the first task of a fresh runtime is 1 and ids from different incarnations
/// never collide.
pub const ID_STRIDE: u64 = 10_000;

pub const DEFAULT_QUIESCE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskState {
    Runnable,
    SuspendedAtSafepoint,
    BlockedOnLock,
}

impl TaskState {
    fn parked(self) -> bool {
        !matches!(self, TaskState::Runnable)
    }

    pub fn code(self) -> u8 {
        match self {
            TaskState::Runnable => 0,
            TaskState::SuspendedAtSafepoint => 1,
            TaskState::BlockedOnLock => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TaskState::Runnable),
            1 => Some(TaskState::SuspendedAtSafepoint),
            2 => Some(TaskState::BlockedOnLock),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub tid: u64,
    pub entry: String,
    pub state: TaskState,
    pub signals: Vec<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockRecord {
    pub id: u64,
    pub owner: Option<u64>,
}

impl LockRecord {
    pub fn held(&self) -> bool {
        self.owner.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConnClass {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnRecord {
    pub handle: u64,
    pub peer: String,
    pub class: ConnClass,
    /// Undelivered bytes captured by the last drain.
    pub inflight: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileRecord {
    pub handle: u64,
    pub path: PathBuf,
}

struct Connection {
    peer: String,
    class: ConnClass,
    /// Bytes sent but not yet received ("on the bus").
    transit: VecDeque<u8>,
    inflight: Vec<u8>,
    tcp: Option<TcpStream>,
}

/// The emulator as seen by the runtime: a netlist plus register storage that
/// may be loaded lazily.
pub struct Device {
    pub netlist: Arc<Netlist>,
    pub cycle: u64,
    pub regs: Box<dyn RegisterBank + Send>,
    pub last_outputs: Bits,
}

impl Device {
    pub fn new(netlist: Arc<Netlist>, state: EmulatorState) -> Self {
        Self {
            netlist,
            cycle: state.cycle,
            regs: Box::new(state.regs),
            last_outputs: state.last_outputs,
        }
    }

    /// Materialise the full state; forces every lazily held register.
    pub fn state(&self) -> Result<EmulatorState, SimError> {
        Ok(EmulatorState {
            netlist_id: self.netlist.id(),
            cycle: self.cycle,
            regs: (0..self.regs.len())
                .map(|i| self.regs.read(i))
                .collect::<Result<_, _>>()?,
            last_outputs: self.last_outputs.clone(),
        })
    }

    fn clock(&mut self, args: &ClockStep) -> Result<StepReply, CallError> {
        if args.cycle != self.cycle {
            return Err(CallError::CycleMismatch {
                expected: self.cycle,
                got: args.cycle,
            });
        }
        for &r in &args.reg_flips {
            if r >= self.regs.len() {
                return Err(CallError::BadRegister(r));
            }
            let v = self.regs.read(r)?;
            self.regs.write(r, !v);
        }
        let outcome = self
            .netlist
            .step_bank(self.regs.as_mut(), &args.inputs, &args.overrides)?;
        let cycle = self.cycle;
        self.cycle += 1;
        self.last_outputs.clone_from(&outcome.outputs);
        Ok(StepReply { cycle, outcome })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuiesceError {
    #[error("tasks {0:?} did not reach a safe-point in time")]
    Timeout(Vec<u64>),
}

/// Evidence that the runtime was quiescent; only [`Runtime::quiesce`] makes one.
#[derive(Debug)]
#[non_exhaustive]
pub struct Quiescent {
    pub incarnation: u64,
}

struct State {
    incarnation: u64,
    next_task: u64,
    next_conn: u64,
    next_file: u64,
    tasks: BTreeMap<u64, TaskRecord>,
    locks: BTreeMap<u64, Option<u64>>,
    conns: BTreeMap<u64, Connection>,
    files: BTreeMap<u64, PathBuf>,
    env: BTreeMap<String, String>,
    device: Option<Device>,
    suspended: bool,
    counts: BTreeMap<CallName, u64>,
}

pub struct Runtime {
    state: Mutex<State>,
    cond: Condvar,
    quiesce_timeout: Duration,
}

impl Runtime {
    pub fn new(incarnation: u64) -> Self {
        Self::with_env(incarnation, std::env::vars().collect())
    }

    pub fn with_env(incarnation: u64, env: BTreeMap<String, String>) -> Self {
        Self {
            state: Mutex::new(State {
                incarnation,
                next_task: 1,
                next_conn: 1,
                next_file: 1,
                tasks: BTreeMap::new(),
                locks: BTreeMap::new(),
                conns: BTreeMap::new(),
                files: BTreeMap::new(),
                env,
                device: None,
                suspended: false,
                counts: BTreeMap::new(),
            }),
            cond: Condvar::new(),
            quiesce_timeout: DEFAULT_QUIESCE_TIMEOUT,
        }
    }

    pub fn with_quiesce_timeout(mut self, timeout: Duration) -> Self {
        self.quiesce_timeout = timeout;
        self
    }

    fn lock_state(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn incarnation(&self) -> u64 {
        self.lock_state().incarnation
    }

    fn fresh_id(incarnation: u64, next: &mut u64) -> Result<u64, CallError> {
        if *next >= ID_STRIDE {
            return Err(CallError::TidSpaceExhausted);
        }
        let id = incarnation * ID_STRIDE + *next;
        *next += 1;
        Ok(id)
    }

    pub fn spawn_task(&self, entry: &str) -> Result<u64, CallError> {
        let mut st = self.lock_state();
        let inc = st.incarnation;
        let tid = Self::fresh_id(inc, &mut st.next_task)?;
        st.tasks.insert(
            tid,
            TaskRecord {
                tid,
                entry: entry.to_string(),
                state: TaskState::SuspendedAtSafepoint,
                signals: Vec::new(),
            },
        );
        Ok(tid)
    }

    pub fn kill_task(&self, tid: u64, sig: i32) -> Result<(), CallError> {
        let mut st = self.lock_state();
        let task = st.tasks.get_mut(&tid).ok_or(CallError::UnknownTid(tid))?;
        task.signals.push(sig);
        Ok(())
    }

    pub fn tasks(&self) -> Vec<TaskRecord> {
        self.lock_state().tasks.values().cloned().collect()
    }

    pub fn task(&self, tid: u64) -> Option<TaskRecord> {
        self.lock_state().tasks.get(&tid).cloned()
    }

    pub fn task_by_entry(&self, entry: &str) -> Option<u64> {
        self.lock_state()
            .tasks
            .values()
            .find(|t| t.entry == entry)
            .map(|t| t.tid)
    }

    /// Called by a task before doing work. Blocks while a suspension is in
    /// progress.
    pub fn enter(&self, tid: u64) -> Result<(), CallError> {
        let mut st = self.lock_state();
        if !st.tasks.contains_key(&tid) {
            return Err(CallError::UnknownTid(tid));
        }
        while st.suspended {
            st = self.cond.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.tasks.get_mut(&tid).expect("checked above").state = TaskState::Runnable;
        Ok(())
    }

    /// Called by a task at a cycle boundary: it parks here until it enters again.
    pub fn safepoint(&self, tid: u64) -> Result<(), CallError> {
        let mut st = self.lock_state();
        let task = st.tasks.get_mut(&tid).ok_or(CallError::UnknownTid(tid))?;
        task.state = TaskState::SuspendedAtSafepoint;
        self.cond.notify_all();
        Ok(())
    }

    pub fn lock(&self, lock: u64, tid: u64) -> Result<(), CallError> {
        let mut st = self.lock_state();
        let prior = st.tasks.get(&tid).ok_or(CallError::UnknownTid(tid))?.state;
        loop {
            let owner = *st.locks.entry(lock).or_insert(None);
            match owner {
                Some(o) if o == tid => return Err(CallError::Relock { lock, tid }),
                None if !st.suspended => break,
                _ => {
                    if let Some(t) = st.tasks.get_mut(&tid) {
                        t.state = TaskState::BlockedOnLock;
                    }
                    self.cond.notify_all();
                    st = self.cond.wait(st).unwrap_or_else(|e| e.into_inner());
                }
            }
        }
        st.locks.insert(lock, Some(tid));
        if let Some(t) = st.tasks.get_mut(&tid) {
            t.state = prior;
        }
        Ok(())
    }

    pub fn unlock(&self, lock: u64, tid: u64) -> Result<(), CallError> {
        let mut st = self.lock_state();
        let owner = *st.locks.get(&lock).ok_or(CallError::UnknownLock(lock))?;
        if owner != Some(tid) {
            return Err(CallError::NotOwner {
                lock,
                owner,
                caller: tid,
            });
        }
        st.locks.insert(lock, None);
        self.cond.notify_all();
        Ok(())
    }

    pub fn locks(&self) -> Vec<LockRecord> {
        self.lock_state()
            .locks
            .iter()
            .map(|(&id, &owner)| LockRecord { id, owner })
            .collect()
    }

    /// Install a lock record verbatim (restart path; owners are not validated).
    pub fn set_lock(&self, record: LockRecord) {
        self.lock_state().locks.insert(record.id, record.owner);
        self.cond.notify_all();
    }

    pub fn connect(&self, peer: &str) -> Result<u64, CallError> {
        let tcp = if let Some(addr) = peer.strip_prefix("tcp:") {
            Some(TcpStream::connect(addr)?)
        } else if peer.starts_with("loop:") {
            None
        } else {
            return Err(CallError::UnsupportedPeer(peer.to_string()));
        };
        self.insert_connection(peer, ConnClass::Internal, Vec::new(), tcp)
    }

    fn insert_connection(
        &self,
        peer: &str,
        class: ConnClass,
        inflight: Vec<u8>,
        tcp: Option<TcpStream>,
    ) -> Result<u64, CallError> {
        let mut st = self.lock_state();
        let inc = st.incarnation;
        let handle = Self::fresh_id(inc, &mut st.next_conn)?;
        st.conns.insert(
            handle,
            Connection {
                peer: peer.to_string(),
                class,
                transit: VecDeque::new(),
                inflight,
                tcp,
            },
        );
        Ok(handle)
    }

    /// Recreate a connection from a checkpoint record under a fresh handle.
    /// TCP peers are reconnected; drained bytes go back into `inflight`
    /// until the next refill.
    pub fn restore_connection(&self, record: &ConnRecord) -> Result<u64, CallError> {
        let tcp = match record.peer.strip_prefix("tcp:") {
            Some(addr) => Some(TcpStream::connect(addr)?),
            None => None,
        };
        self.insert_connection(&record.peer, record.class, record.inflight.clone(), tcp)
    }

    pub fn classify_connection(&self, handle: u64, class: ConnClass) -> Result<(), CallError> {
        let mut st = self.lock_state();
        let conn = st.conns.get_mut(&handle).ok_or(CallError::UnknownHandle(handle))?;
        conn.class = class;
        Ok(())
    }

    pub fn close_connection(&self, handle: u64) -> Result<(), CallError> {
        let mut st = self.lock_state();
        let conn = st.conns.remove(&handle).ok_or(CallError::UnknownHandle(handle))?;
        if let Some(s) = conn.tcp {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        Ok(())
    }

    pub fn send(&self, handle: u64, data: &[u8]) -> Result<usize, CallError> {
        let stream = {
            let mut st = self.lock_state();
            let conn = st.conns.get_mut(&handle).ok_or(CallError::UnknownHandle(handle))?;
            match &conn.tcp {
                Some(s) => s.try_clone()?,
                None => {
                    conn.transit.extend(data);
                    return Ok(data.len());
                }
            }
        };
        (&stream).write_all(data)?;
        Ok(data.len())
    }

    /// Buffered bytes first; a TCP connection with nothing buffered blocks
    /// on the socket.
    pub fn recv(&self, handle: u64, max: usize) -> Result<Vec<u8>, CallError> {
        let stream = {
            let mut st = self.lock_state();
            let conn = st.conns.get_mut(&handle).ok_or(CallError::UnknownHandle(handle))?;
            let mut out = Vec::new();
            let n = conn.inflight.len().min(max);
            out.extend(conn.inflight.drain(..n));
            while out.len() < max {
                match conn.transit.pop_front() {
                    Some(b) => out.push(b),
                    None => break,
                }
            }
            match &conn.tcp {
                Some(s) if out.is_empty() && max > 0 => s.try_clone()?,
                _ => return Ok(out),
            }
        };
        let mut buf = vec![0u8; max];
        let n = (&stream).read(&mut buf)?;
        buf.truncate(n);
        Ok(buf)
    }

    pub fn connections(&self) -> Vec<ConnRecord> {
        self.lock_state()
            .conns
            .iter()
            .map(|(&handle, c)| ConnRecord {
                handle,
                peer: c.peer.clone(),
                class: c.class,
                inflight: c.inflight.clone(),
            })
            .collect()
    }

    /// Bytes sent on a connection that nobody has received yet.
    pub fn transit_len(&self, handle: u64) -> Option<usize> {
        self.lock_state().conns.get(&handle).map(|c| c.transit.len())
    }

    pub fn open_path(&self, path: &str) -> Result<u64, CallError> {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let mut st = self.lock_state();
        let handle = st.next_file;
        st.next_file += 1;
        st.files.insert(handle, PathBuf::from(path));
        Ok(handle)
    }

    pub fn files(&self) -> Vec<FileRecord> {
        self.lock_state()
            .files
            .iter()
            .map(|(&handle, path)| FileRecord {
                handle,
                path: path.clone(),
            })
            .collect()
    }

    pub fn getenv(&self, key: &str) -> Option<String> {
        self.lock_state().env.get(key).cloned()
    }

    pub fn setenv(&self, key: &str, value: &str) {
        self.lock_state().env.insert(key.into(), value.into());
    }

    pub fn attach_device(&self, device: Device) {
        self.lock_state().device = Some(device);
    }

    pub fn with_device<T>(&self, f: impl FnOnce(&mut Device) -> T) -> Result<T, CallError> {
        let mut st = self.lock_state();
        st.device.as_mut().map(f).ok_or(CallError::NoDevice)
    }

    pub fn device_state(&self) -> Result<EmulatorState, CallError> {
        let st = self.lock_state();
        Ok(st.device.as_ref().ok_or(CallError::NoDevice)?.state()?)
    }

    pub fn clock_step(&self, args: &ClockStep) -> Result<StepReply, CallError> {
        let mut st = self.lock_state();
        st.device.as_mut().ok_or(CallError::NoDevice)?.clock(args)
    }

    /// Park every task at a safe-point and drain in-flight bytes of internal
    /// connections into their `inflight` buffers. On timeout the suspension is
    /// lifted again and nothing is drained.
    pub fn quiesce(&self) -> Result<Quiescent, QuiesceError> {
        let mut st = self.lock_state();
        st.suspended = true;
        let mut waited = Duration::ZERO;
        let slice = Duration::from_millis(5);
        loop {
            let running: Vec<u64> = st
                .tasks
                .values()
                .filter(|t| !t.state.parked())
                .map(|t| t.tid)
                .collect();
            if running.is_empty() {
                break;
            }
            if waited >= self.quiesce_timeout {
                st.suspended = false;
                self.cond.notify_all();
                return Err(QuiesceError::Timeout(running));
            }
            let (guard, _) = self
                .cond
                .wait_timeout(st, slice)
                .unwrap_or_else(|e| e.into_inner());
            st = guard;
            waited += slice;
        }
        for conn in st.conns.values_mut() {
            if conn.class != ConnClass::Internal {
                continue;
            }
            let drained: Vec<u8> = conn.transit.drain(..).collect();
            conn.inflight.extend(drained);
            if let Some(s) = &conn.tcp {
                drain_socket(s, &mut conn.inflight);
            }
        }
        Ok(Quiescent {
            incarnation: st.incarnation,
        })
    }

    pub fn is_quiescent(&self) -> bool {
        let st = self.lock_state();
        st.suspended && st.tasks.values().all(|t| t.state.parked())
    }

    /// Put drained bytes of in-process connections back on the wire.
    pub fn refill(&self) {
        let mut st = self.lock_state();
        for conn in st.conns.values_mut() {
            if conn.tcp.is_none() && !conn.inflight.is_empty() {
                let bytes = std::mem::take(&mut conn.inflight);
                for b in bytes.into_iter().rev() {
                    conn.transit.push_front(b);
                }
            }
        }
    }

    pub fn resume(&self) {
        let mut st = self.lock_state();
        st.suspended = false;
        self.cond.notify_all();
    }

    pub fn call_counts(&self) -> BTreeMap<CallName, u64> {
        self.lock_state().counts.clone()
    }
}

fn drain_socket(s: &TcpStream, into: &mut Vec<u8>) {
    if s.set_nonblocking(true).is_err() {
        return;
    }
    let mut buf = [0u8; 4096];
    while let Ok(n) = (&*s).read(&mut buf) {
        if n == 0 {
            break;
        }
        into.extend_from_slice(&buf[..n]);
    }
    let _ = s.set_nonblocking(false);
}

impl CallTarget for Runtime {
    fn execute(&self, call: Call) -> Result<Reply, CallError> {
        *self.lock_state().counts.entry(call.name()).or_insert(0) += 1;
        match call {
            Call::Spawn { entry } => self.spawn_task(&entry).map(Reply::Tid),
            Call::Kill { tid, sig } => self.kill_task(tid, sig).map(|_| Reply::Ack),
            Call::Lock { lock, tid } => self.lock(lock, tid).map(|_| Reply::Ack),
            Call::Unlock { lock, tid } => self.unlock(lock, tid).map(|_| Reply::Ack),
            Call::OpenPath { path } => self.open_path(&path).map(Reply::File),
            Call::Getenv { key } => Ok(Reply::Env(self.getenv(&key))),
            Call::Connect { peer } => self.connect(&peer).map(Reply::Handle),
            Call::Send { handle, data } => self.send(handle, &data).map(Reply::Sent),
            Call::Recv { handle, max } => self.recv(handle, max).map(Reply::Data),
            Call::ClockStep(args) => self.clock_step(&args).map(Reply::Step),
        }
    }
}

impl CallTarget for Arc<Runtime> {
    fn execute(&self, call: Call) -> Result<Reply, CallError> {
        self.as_ref().execute(call)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;
    use std::time::Instant;

    fn rt() -> Runtime {
        Runtime::with_env(0, BTreeMap::from([("HOME".to_string(), "/home/emu".to_string())]))
    }

    #[test]
    fn first_spawn_is_one_and_incarnations_differ() {
        let a = rt();
        assert_eq!(a.spawn_task("main").unwrap(), 1);
        assert_eq!(a.spawn_task("helper").unwrap(), 2);
        let b = Runtime::with_env(1, BTreeMap::new());
        assert_ne!(b.spawn_task("main").unwrap(), 1);
    }

    #[test]
    fn kill_unknown_tid() {
        assert_eq!(rt().kill_task(999, 9), Err(CallError::UnknownTid(999)));
    }

    #[test]
    fn kill_delivers_to_real_tid() {
        let r = rt();
        let t = r.spawn_task("main").unwrap();
        r.kill_task(t, 15).unwrap();
        assert_eq!(r.task(t).unwrap().signals, vec![15]);
    }

    #[test]
    fn error_checking_lock() {
        let r = rt();
        let t1 = r.spawn_task("a").unwrap();
        let t2 = r.spawn_task("b").unwrap();
        r.lock(7, t1).unwrap();
        assert_eq!(
            r.unlock(7, t2),
            Err(CallError::NotOwner { lock: 7, owner: Some(t1), caller: t2 })
        );
        assert_eq!(r.locks()[0].owner, Some(t1));
        assert_eq!(r.lock(7, t1), Err(CallError::Relock { lock: 7, tid: t1 }));
        r.unlock(7, t1).unwrap();
        assert_eq!(r.locks()[0].owner, None);
        assert_eq!(r.unlock(8, t1), Err(CallError::UnknownLock(8)));
    }

    #[test]
    fn contended_lock_blocks_until_release() {
        let r = Arc::new(rt());
        let t1 = r.spawn_task("a").unwrap();
        let t2 = r.spawn_task("b").unwrap();
        r.lock(1, t1).unwrap();
        let r2 = r.clone();
        let h = thread::spawn(move || {
            r2.lock(1, t2).unwrap();
            r2.unlock(1, t2).unwrap();
        });
        thread::sleep(Duration::from_millis(30));
        assert_eq!(r.task(t2).unwrap().state, TaskState::BlockedOnLock);
        r.unlock(1, t1).unwrap();
        h.join().unwrap();
    }

    #[test]
    fn quiesce_with_no_tasks_is_immediate() {
        let r = rt();
        assert!(r.quiesce().is_ok());
        assert!(r.is_quiescent());
    }

    #[test]
    fn quiesce_waits_for_running_task_to_finish_its_cycle() {
        let r = Arc::new(rt());
        let t = r.spawn_task("driver").unwrap();
        r.enter(t).unwrap();
        let done = Arc::new(Mutex::new(None));
        let (r2, done2) = (r.clone(), done.clone());
        let h = thread::spawn(move || {
            thread::sleep(Duration::from_millis(60));
            *done2.lock().unwrap() = Some(Instant::now());
            r2.safepoint(t).unwrap();
        });
        r.quiesce().unwrap();
        let returned = Instant::now();
        let finished = done.lock().unwrap().expect("cycle finished before quiesce returned");
        assert!(finished <= returned);
        h.join().unwrap();
        r.resume();
    }

    #[test]
    fn quiesce_times_out_and_lifts_suspension() {
        let r = rt().with_quiesce_timeout(Duration::from_millis(20));
        let t = r.spawn_task("stuck").unwrap();
        r.enter(t).unwrap();
        assert_eq!(r.quiesce().unwrap_err(), QuiesceError::Timeout(vec![t]));
        assert!(!r.is_quiescent());
    }

    #[test]
    fn drain_moves_unread_bytes_into_inflight() {
        let r = rt();
        let h = r.connect("loop:bus").unwrap();
        r.send(h, b"abcde").unwrap();
        r.quiesce().unwrap();
        let c = r.connections().into_iter().find(|c| c.handle == h).unwrap();
        assert_eq!(c.inflight, b"abcde");
        assert_eq!(r.transit_len(h), Some(0));
        r.refill();
        r.resume();
        assert_eq!(r.recv(h, 16).unwrap(), b"abcde");
    }

    #[test]
    fn external_connections_are_not_drained() {
        let r = rt();
        let h = r.connect("loop:lic").unwrap();
        r.classify_connection(h, ConnClass::External).unwrap();
        r.send(h, b"xyz").unwrap();
        r.quiesce().unwrap();
        assert!(r.connections()[0].inflight.is_empty());
        assert_eq!(r.transit_len(h), Some(3));
    }

    #[test]
    fn classify_unknown_handle() {
        assert_eq!(
            rt().classify_connection(5, ConnClass::External),
            Err(CallError::UnknownHandle(5))
        );
    }

    #[test]
    fn unclassified_connections_are_internal() {
        let r = rt();
        r.connect("loop:x").unwrap();
        assert_eq!(r.connections()[0].class, ConnClass::Internal);
    }

    #[test]
    fn getenv_reads_runtime_environment() {
        assert_eq!(rt().getenv("HOME").as_deref(), Some("/home/emu"));
        assert_eq!(rt().getenv("NOPE"), None);
    }

    #[test]
    fn enter_blocks_while_suspended() {
        let r = Arc::new(rt());
        let t = r.spawn_task("w").unwrap();
        r.quiesce().unwrap();
        let r2 = r.clone();
        let h = thread::spawn(move || {
            r2.enter(t).unwrap();
            Instant::now()
        });
        thread::sleep(Duration::from_millis(30));
        let resumed_at = Instant::now();
        r.resume();
        assert!(h.join().unwrap() >= resumed_at);
    }
}
