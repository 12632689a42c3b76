use std::io::{self, Read, Write};

use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};

pub const MAX_FRAME: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Payload(#[from] DecodeError),
}

/// Coordinator protocol messages. Each frame is a u32 little-endian payload
/// length, a u8 type and the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Msg {
    /// Worker to coordinator: `worker` is the id to reuse (0 for a fresh one)
    /// and `world` the number of workers restarting together (0 at launch).
    /// Coordinator to worker: the assigned id.
    Register { worker: u64, world: u64 },
    /// Worker to coordinator: the local schedule for a lifecycle.
    /// Coordinator to worker: the agreed schedule, lifecycle id and number
    /// of participating workers.
    DeclareBarrier {
        side: u8,
        lifecycle: u64,
        names: Vec<String>,
        image_hash: u64,
        world: u64,
    },
    DeclareResource { names: Vec<String> },
    Suspend { lifecycle: u64 },
    Arrived { name: String },
    Release { name: String },
    Elect { resource: String },
    Leader { resource: String, worker: u64 },
    Abort { reason: String },
    /// Empty from a client; the roster text in the reply.
    Status { text: String },
    Error { msg: String },
    /// Asks for a global checkpoint.
    Request,
    /// Worker to coordinator: lifecycle finished, with the image path.
    /// Coordinator to requester: every worker's result, one per line.
    Done { text: String },
}

impl Msg {
    pub fn code(&self) -> u8 {
        match self {
            Msg::Register { .. } => 1,
            Msg::DeclareBarrier { .. } => 2,
            Msg::DeclareResource { .. } => 3,
            Msg::Suspend { .. } => 4,
            Msg::Arrived { .. } => 5,
            Msg::Release { .. } => 6,
            Msg::Elect { .. } => 7,
            Msg::Leader { .. } => 8,
            Msg::Abort { .. } => 9,
            Msg::Status { .. } => 10,
            Msg::Error { .. } => 11,
            Msg::Request => 12,
            Msg::Done { .. } => 13,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        let list = |e: &mut Encoder, names: &[String]| {
            e.u32(names.len() as u32);
            for n in names {
                e.str(n);
            }
        };
        match self {
            Msg::Register { worker, world } => {
                e.u64(*worker).u64(*world);
            }
            Msg::DeclareBarrier {
                side,
                lifecycle,
                names,
                image_hash,
                world,
            } => {
                e.u8(*side).u64(*lifecycle);
                list(&mut e, names);
                e.u64(*image_hash).u64(*world);
            }
            Msg::DeclareResource { names } => list(&mut e, names),
            Msg::Suspend { lifecycle } => {
                e.u64(*lifecycle);
            }
            Msg::Arrived { name } | Msg::Release { name } => {
                e.str(name);
            }
            Msg::Elect { resource } => {
                e.str(resource);
            }
            Msg::Leader { resource, worker } => {
                e.str(resource).u64(*worker);
            }
            Msg::Abort { reason: s } | Msg::Status { text: s } | Msg::Error { msg: s } | Msg::Done { text: s } => {
                e.str(s);
            }
            Msg::Request => {}
        }
        e.finish()
    }

    fn decode(code: u8, payload: &[u8]) -> Result<Msg, WireError> {
        let mut d = Decoder::new(payload);
        let list = |d: &mut Decoder<'_>| -> Result<Vec<String>, DecodeError> {
            (0..d.u32()?).map(|_| d.string()).collect()
        };
        let msg = match code {
            1 => Msg::Register {
                worker: d.u64()?,
                world: d.u64()?,
            },
            2 => Msg::DeclareBarrier {
                side: d.u8()?,
                lifecycle: d.u64()?,
                names: list(&mut d)?,
                image_hash: d.u64()?,
                world: d.u64()?,
            },
            3 => Msg::DeclareResource { names: list(&mut d)? },
            4 => Msg::Suspend { lifecycle: d.u64()? },
            5 => Msg::Arrived { name: d.string()? },
            6 => Msg::Release { name: d.string()? },
            7 => Msg::Elect { resource: d.string()? },
            8 => Msg::Leader {
                resource: d.string()?,
                worker: d.u64()?,
            },
            9 => Msg::Abort { reason: d.string()? },
            10 => Msg::Status { text: d.string()? },
            11 => Msg::Error { msg: d.string()? },
            12 => Msg::Request,
            13 => Msg::Done { text: d.string()? },
            other => return Err(WireError::UnknownType(other)),
        };
        d.finish()?;
        Ok(msg)
    }
}

pub fn write_msg(w: &mut impl Write, msg: &Msg) -> io::Result<()> {
    let payload = msg.payload();
    let mut frame = Vec::with_capacity(payload.len() + 5);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.push(msg.code());
    frame.extend_from_slice(&payload);
    w.write_all(&frame)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_msg(r: &mut impl Read) -> Result<Option<Msg>, WireError> {
    let mut head = [0u8; 5];
    match r.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes([head[0], head[1], head[2], head[3]]);
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Msg::decode(head[4], &payload).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_message_round_trips() {
        let msgs = vec![
            Msg::Register { worker: 3, world: 2 },
            Msg::DeclareBarrier {
                side: 1,
                lifecycle: 9,
                names: vec!["Suspend".into(), "Drain".into()],
                image_hash: 77,
                world: 2,
            },
            Msg::DeclareResource { names: vec!["emu-bus".into()] },
            Msg::Suspend { lifecycle: 4 },
            Msg::Arrived { name: "Drain".into() },
            Msg::Release { name: "Drain".into() },
            Msg::Elect { resource: "emu-bus".into() },
            Msg::Leader {
                resource: "emu-bus".into(),
                worker: 1,
            },
            Msg::Abort { reason: "gone".into() },
            Msg::Status { text: String::new() },
            Msg::Error { msg: "dup".into() },
            Msg::Request,
            Msg::Done { text: "/tmp/a.img".into() },
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_msg(&mut buf, m).unwrap();
        }
        let mut r = buf.as_slice();
        for m in &msgs {
            assert_eq!(read_msg(&mut r).unwrap().as_ref(), Some(m));
        }
        assert!(read_msg(&mut r).unwrap().is_none());
    }

    #[test]
    fn rejects_bad_frames() {
        let mut r: &[u8] = &[0, 0, 0, 0, 99];
        assert!(matches!(read_msg(&mut r), Err(WireError::UnknownType(99))));
        let mut r: &[u8] = &[0xff, 0xff, 0xff, 0xff, 1];
        assert!(matches!(read_msg(&mut r), Err(WireError::TooLarge(_))));
        let mut r: &[u8] = &[1, 0, 0, 0, 12, 0];
        assert!(matches!(read_msg(&mut r), Err(WireError::Payload(_))));
    }
}
