//! A mock seat-licensing service and the plugin that keeps a workload
//! licensed across checkpoints.
//!
//! Protocol, one line per message over TCP:
//!
//! ```text
//! CHECKOUT holder  ->  GRANT seat | DENY
//! RELEASE seat     ->  OK | ERR ...
//! PING             ->  PONG
//! ```
//!
//! A seat is leased to its holder until the lease expires; a holder that
//! checks out again gets the same seat back and renews the lease.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::call::CallError;
use crate::plugin::{Event, EventCtx, Plugin, PluginError};
use crate::runtime::{ConnClass, Runtime};

pub const PROTOCOL_WORDS: [&str; 6] = ["CHECKOUT", "GRANT", "DENY", "RELEASE", "PING", "PONG"];
pub const DEFAULT_LEASE: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub nanos: u64,
    pub event: String,
    pub in_use: usize,
}

#[derive(Debug, Clone)]
struct Lease {
    holder: String,
    expires: Instant,
}

struct Seats {
    capacity: usize,
    lease: Duration,
    held: BTreeMap<u32, Lease>,
    audit: Vec<AuditEntry>,
}

impl Seats {
    fn record(&mut self, event: String) {
        self.audit.push(AuditEntry {
            nanos: crate::clock::monotonic_nanos(),
            event,
            in_use: self.held.len(),
        });
    }

    fn expire(&mut self, now: Instant) {
        let expired: Vec<u32> = self
            .held
            .iter()
            .filter(|(_, l)| l.expires <= now)
            .map(|(&s, _)| s)
            .collect();
        for s in expired {
            let l = self.held.remove(&s);
            self.record(format!("expire {s} {}", l.map(|l| l.holder).unwrap_or_default()));
        }
    }

    fn handle(&mut self, line: &str, conn_holder: &mut Option<String>) -> String {
        let now = Instant::now();
        self.expire(now);
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["CHECKOUT", holder] => {
                let holder = holder.to_string();
                *conn_holder = Some(holder.clone());
                let expires = now + self.lease;
                if let Some((&seat, lease)) = self.held.iter_mut().find(|(_, l)| l.holder == holder) {
                    lease.expires = expires;
                    self.record(format!("renew {seat} {holder}"));
                    return format!("GRANT {seat}");
                }
                if self.held.len() >= self.capacity {
                    self.record(format!("deny {holder}"));
                    return "DENY".into();
                }
                let seat = (1..=self.capacity as u32).find(|s| !self.held.contains_key(s)).unwrap_or(1);
                self.held.insert(seat, Lease { holder: holder.clone(), expires });
                self.record(format!("grant {seat} {holder}"));
                format!("GRANT {seat}")
            }
            ["RELEASE", seat] => match seat.parse::<u32>() {
                Ok(s) if self.held.contains_key(&s) => {
                    self.held.remove(&s);
                    self.record(format!("release {s}"));
                    "OK".into()
                }
                _ => format!("ERR no seat {seat}"),
            },
            ["PING"] => {
                if let Some(h) = conn_holder.as_deref() {
                    let expires = now + self.lease;
                    for l in self.held.values_mut().filter(|l| l.holder == h) {
                        l.expires = expires;
                    }
                }
                "PONG".into()
            }
            _ => format!("ERR unknown request `{}`", line.trim()),
        }
    }
}

struct Shared {
    seats: Mutex<Seats>,
    stop: AtomicBool,
    streams: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn seats(&self) -> std::sync::MutexGuard<'_, Seats> {
        self.seats.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// The seat service. Dropping it stops the listener and closes every client
/// connection.
pub struct LicenseServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl LicenseServer {
    pub fn bind(addr: &str, capacity: usize, lease: Duration) -> io::Result<Self> {
        if capacity == 0 {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "capacity must be at least 1"));
        }
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            seats: Mutex::new(Seats {
                capacity,
                lease,
                held: BTreeMap::new(),
                audit: Vec::new(),
            }),
            stop: AtomicBool::new(false),
            streams: Mutex::new(Vec::new()),
        });
        let sh = shared.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if sh.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Ok(clone) = stream.try_clone() {
                    sh.streams.lock().unwrap_or_else(|e| e.into_inner()).push(clone);
                }
                let sh = sh.clone();
                std::thread::spawn(move || serve_client(stream, &sh));
            }
        });
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.shared.seats().audit.clone()
    }

    pub fn capacity(&self) -> usize {
        self.shared.seats().capacity
    }

    pub fn in_use(&self) -> usize {
        self.shared.seats().held.len()
    }

    /// Highest seat count the audit log ever recorded.
    pub fn max_in_use(&self) -> usize {
        self.shared.seats().audit.iter().map(|a| a.in_use).max().unwrap_or(0)
    }

    /// Blocks until the service is shut down from another thread.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        for s in self.shared.streams.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for LicenseServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_client(stream: TcpStream, shared: &Shared) {
    let Ok(mut writer) = stream.try_clone() else { return };
    let mut holder = None;
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let reply = shared.seats().handle(&line, &mut holder);
        if writeln!(writer, "{reply}").is_err() {
            break;
        }
    }
}

/// Sends one request line over a runtime connection and reads one reply line.
pub fn exchange(rt: &Runtime, handle: u64, line: &str) -> Result<String, CallError> {
    rt.send(handle, format!("{line}\n").as_bytes())?;
    let mut buf = Vec::new();
    while !buf.ends_with(b"\n") {
        let chunk = rt.recv(handle, 64)?;
        if chunk.is_empty() {
            return Err(CallError::Io("license service closed the connection".into()));
        }
        buf.extend(chunk);
    }
    Ok(String::from_utf8_lossy(&buf).trim().to_string())
}

/// Holder names travel in protocol lines and are kept in images, so they must
/// be single words that cannot be mistaken for protocol payload.
pub fn valid_holder(holder: &str) -> bool {
    !holder.is_empty()
        && !holder.chars().any(char::is_whitespace)
        && !PROTOCOL_WORDS
            .iter()
            .any(|w| holder.to_ascii_uppercase().contains(w))
}

#[derive(Default)]
struct LicState {
    handle: Option<u64>,
    seat: Option<u32>,
    saved_seat: Option<u32>,
    last_try: Option<Instant>,
}

const RETRY_INTERVAL: Duration = Duration::from_millis(50);

fn checkout(rt: &Runtime, server: &str, holder: &str, st: &mut LicState) -> Result<bool, CallError> {
    let handle = match st.handle {
        Some(h) => h,
        None => {
            let h = rt.connect(&format!("tcp:{server}"))?;
            rt.classify_connection(h, ConnClass::External)?;
            st.handle = Some(h);
            h
        }
    };
    let reply = match exchange(rt, handle, &format!("CHECKOUT {holder}")) {
        Ok(r) => r,
        Err(e) => {
            let _ = rt.close_connection(handle);
            st.handle = None;
            return Err(e);
        }
    };
    match reply.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["GRANT", seat] => {
            st.seat = seat.parse().ok();
            Ok(true)
        }
        _ => Ok(false),
    }
}

/// Checks a seat out at launch and again at restart. Its connection is
/// external: it never appears in an image, and at restart a resume gate
/// holds the workload until a seat has been granted again.
pub struct LicensePlugin {
    rank: u32,
    holder: String,
    server: String,
    st: Arc<Mutex<LicState>>,
}

impl LicensePlugin {
    pub const NAME: &'static str = "license";

    pub fn new(rank: u32, holder: &str, server: &str) -> Result<Self, String> {
        if !valid_holder(holder) {
            return Err(format!("invalid license holder name `{holder}`"));
        }
        Ok(Self {
            rank,
            holder: holder.to_string(),
            server: server.to_string(),
            st: Arc::new(Mutex::new(LicState::default())),
        })
    }

    pub fn seat(&self) -> Option<u32> {
        self.state().seat
    }

    pub fn saved_seat(&self) -> Option<u32> {
        self.state().saved_seat
    }

    pub fn handle(&self) -> Option<u64> {
        self.state().handle
    }

    fn state(&self) -> std::sync::MutexGuard<'_, LicState> {
        self.st.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Plugin for LicensePlugin {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn on_launch(&self, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        let event = Event::Custom("launch".into());
        let granted = checkout(&ctx.env.runtime, &self.server, &self.holder, &mut self.state())
            .map_err(|e| PluginError::hook(Self::NAME, &event, e))?;
        if !granted {
            return Err(PluginError::hook(Self::NAME, &event, "checkout denied: no seat available"));
        }
        Ok(())
    }

    fn on_event(&self, event: &Event, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        if *event != Event::Restart {
            return Ok(());
        }
        let rt = ctx.env.runtime.clone();
        let (server, holder, st) = (self.server.clone(), self.holder.clone(), self.st.clone());
        ctx.env.control.add_gate(Self::NAME, move || {
            let mut st = st.lock().unwrap_or_else(|e| e.into_inner());
            if st.seat.is_some() {
                return true;
            }
            if st.last_try.is_some_and(|t| t.elapsed() < RETRY_INTERVAL) {
                return false;
            }
            st.last_try = Some(Instant::now());
            match checkout(&rt, &server, &holder, &mut st) {
                Ok(granted) => granted,
                Err(e) => {
                    log::debug!("license checkout failed: {e}");
                    false
                }
            }
        });
        Ok(())
    }

    fn save(&self, _ctx: &EventCtx<'_>) -> Result<Option<Vec<u8>>, PluginError> {
        let seat = self.state().seat.map_or_else(|| "-".to_string(), |s| s.to_string());
        Ok(Some(format!("{}\n{}\n{}\n", self.holder, self.server, seat).into_bytes()))
    }

    fn load(&self, blob: &[u8], _ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        let text = String::from_utf8_lossy(blob);
        let lines: Vec<&str> = text.lines().collect();
        let [holder, _server, seat] = lines.as_slice() else {
            return Err(PluginError::codec(Self::NAME, "expected holder, server and seat lines"));
        };
        if *holder != self.holder {
            log::warn!("license holder changed from `{holder}` to `{}`", self.holder);
        }
        let mut st = self.state();
        st.saved_seat = seat.parse().ok();
        st.seat = None;
        st.handle = None;
        Ok(())
    }

    fn spec_line(&self) -> String {
        format!(
            "plugin {} rank {} holder={} server={}",
            Self::NAME,
            self.rank,
            self.holder,
            self.server
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seat_rules() {
        let mut s = Seats {
            capacity: 1,
            lease: Duration::from_secs(60),
            held: BTreeMap::new(),
            audit: Vec::new(),
        };
        let mut conn = None;
        assert_eq!(s.handle("CHECKOUT a", &mut conn), "GRANT 1");
        assert_eq!(s.handle("CHECKOUT a", &mut conn), "GRANT 1");
        assert_eq!(s.handle("CHECKOUT b", &mut None), "DENY");
        assert_eq!(s.handle("PING", &mut conn), "PONG");
        assert_eq!(s.handle("RELEASE 1", &mut conn), "OK");
        assert_eq!(s.handle("CHECKOUT b", &mut None), "GRANT 1");
        assert!(s.handle("HELLO", &mut None).starts_with("ERR"));
        assert!(s.audit.iter().all(|a| a.in_use <= 1));
    }

    #[test]
    fn leases_expire() {
        let mut s = Seats {
            capacity: 1,
            lease: Duration::ZERO,
            held: BTreeMap::new(),
            audit: Vec::new(),
        };
        assert_eq!(s.handle("CHECKOUT a", &mut None), "GRANT 1");
        assert_eq!(s.handle("CHECKOUT b", &mut None), "GRANT 1");
    }

    #[test]
    fn holder_names() {
        assert!(valid_holder("sim-7"));
        assert!(!valid_holder("two words"));
        assert!(!valid_holder("granted"));
        assert!(!valid_holder(""));
    }
}
