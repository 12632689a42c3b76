//! Barrier coordination across worker processes: the wire format, the
//! coordinator service and the worker-side driver.

mod link;
mod server;
pub mod wire;

use std::net::TcpStream;
use std::time::Duration;

pub use link::{LinkKiller, WorkerLink};
pub use server::{CoordEvent, Coordinator};

use crate::engine::ImageSource;
use crate::process::{image_identity, DriverError, Process, ProcessError, RestoreOptions};
use wire::{read_msg, write_msg, Msg};

fn exchange(addr: &str, msg: &Msg, timeout: Option<Duration>) -> Result<Msg, DriverError> {
    let io = |e: std::io::Error| DriverError::Io(format!("{addr}: {e}"));
    let mut s = TcpStream::connect(addr).map_err(io)?;
    s.set_read_timeout(timeout).map_err(io)?;
    write_msg(&mut s, msg).map_err(io)?;
    match read_msg(&mut s) {
        Ok(Some(m)) => Ok(m),
        Ok(None) => Err(DriverError::Io(format!("{addr}: connection closed"))),
        Err(e) => Err(DriverError::Io(format!("{addr}: {e}"))),
    }
}

/// Roster lines (`worker N STATE`) from the coordinator at `addr`.
pub fn query_status(addr: &str) -> Result<Vec<String>, DriverError> {
    match exchange(addr, &Msg::Status { text: String::new() }, Some(Duration::from_secs(10)))? {
        Msg::Status { text } => Ok(text.lines().map(str::to_string).collect()),
        other => Err(DriverError::Protocol(format!("unexpected message type {}", other.code()))),
    }
}

/// Asks for a checkpoint of every running worker and waits for it. Returns
/// `(worker, image path)` pairs in worker order.
pub fn global_checkpoint(addr: &str, timeout: Duration) -> Result<Vec<(u64, String)>, DriverError> {
    match exchange(addr, &Msg::Request, Some(timeout))? {
        Msg::Done { text } => text
            .lines()
            .map(|l| {
                let rest = l.strip_prefix("worker ").unwrap_or(l);
                let (id, path) = rest.split_once(' ').unwrap_or((rest, ""));
                id.parse()
                    .map(|id| (id, path.to_string()))
                    .map_err(|_| DriverError::Protocol(format!("bad completion line `{l}`")))
            })
            .collect(),
        Msg::Abort { reason } => Err(DriverError::Aborted(reason)),
        Msg::Error { msg } => Err(DriverError::Protocol(msg)),
        other => Err(DriverError::Protocol(format!("unexpected message type {}", other.code()))),
    }
}

/// A restarted worker and the link it must keep driving.
pub struct Restarted {
    pub process: Process,
    pub link: WorkerLink,
}

/// Restarts one worker per image, together, through the coordinator at
/// `addr`. Each worker gets back the id stored in its image. `options`
/// supplies restore options per image index.
pub fn global_restart(
    addr: &str,
    images: &[ImageSource],
    options: impl Fn(usize) -> RestoreOptions + Sync,
) -> Vec<Result<Restarted, ProcessError>> {
    let world = images.len() as u64;
    std::thread::scope(|s| {
        let handles: Vec<_> = images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let options = &options;
                s.spawn(move || -> Result<Restarted, ProcessError> {
                    let (worker, _) = image_identity(img)?;
                    let mut link = WorkerLink::connect(addr, worker, world)?;
                    let process = Process::restore(img, options(i), &mut link)?;
                    Ok(Restarted { process, link })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(ProcessError::Workload("restart thread panicked".into())))
            })
            .collect()
    })
}
