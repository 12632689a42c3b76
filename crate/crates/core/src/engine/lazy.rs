use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::emulator::{RegisterBank, SimError};

use super::image::{ImageReader, SectionEntry};
use super::{EngineError, ReadSeek};

/// Registers per lazily loaded segment.
pub const SEGMENT_REGS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentEntry {
    /// Offset inside the register section.
    pub offset: u64,
    pub len: u64,
    pub crc: u32,
}

/// The segment index: one entry per `SEGMENT_REGS` registers.
pub fn build_index(regs: &[u8]) -> Vec<SegmentEntry> {
    regs.chunks(SEGMENT_REGS)
        .enumerate()
        .map(|(i, chunk)| SegmentEntry {
            offset: (i * SEGMENT_REGS) as u64,
            len: chunk.len() as u64,
            crc: crc32fast::hash(chunk),
        })
        .collect()
}

pub fn encode_index(index: &[SegmentEntry]) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(SEGMENT_REGS as u32).u32(index.len() as u32);
    for s in index {
        e.u64(s.offset).u64(s.len).u32(s.crc);
    }
    e.finish()
}

pub fn decode_index(bytes: &[u8]) -> Result<Vec<SegmentEntry>, DecodeError> {
    let mut d = Decoder::new(bytes);
    let size = d.u32()?;
    if size as usize != SEGMENT_REGS {
        return Err(DecodeError::Invalid {
            what: "segment size",
            value: size as u64,
        });
    }
    let n = d.u32()?;
    let index = (0..n)
        .map(|_| {
            Ok(SegmentEntry {
                offset: d.u64()?,
                len: d.u64()?,
                crc: d.u32()?,
            })
        })
        .collect::<Result<_, DecodeError>>()?;
    d.finish()?;
    Ok(index)
}

pub(crate) type SharedReader = Arc<Mutex<ImageReader<Box<dyn ReadSeek>>>>;

/// Register storage backed by an image: each segment is read from the image
/// the first time any of its registers is read, and exactly once even under
/// concurrent first access. Writes land in an overlay and never force a load.
pub struct LazyRegisters {
    len: usize,
    reader: SharedReader,
    section: SectionEntry,
    index: Vec<SegmentEntry>,
    slots: Vec<Mutex<Option<Vec<bool>>>>,
    loads: Vec<AtomicU32>,
    overlay: BTreeMap<usize, bool>,
}

impl LazyRegisters {
    pub(crate) fn new(
        len: usize,
        reader: SharedReader,
        section: SectionEntry,
        index: Vec<SegmentEntry>,
    ) -> Result<Self, EngineError> {
        let covered: u64 = index.iter().map(|s| s.len).sum();
        if covered != len as u64 || section.length != len as u64 {
            return Err(EngineError::Corrupt("core.segidx".into()));
        }
        Ok(Self {
            len,
            slots: index.iter().map(|_| Mutex::new(None)).collect(),
            loads: index.iter().map(|_| AtomicU32::new(0)).collect(),
            reader,
            section,
            index,
            overlay: BTreeMap::new(),
        })
    }

    pub fn segment_count(&self) -> usize {
        self.index.len()
    }

    /// How many times segment `i` has been read from the image.
    pub fn load_count(&self, i: usize) -> u32 {
        self.loads[i].load(Ordering::SeqCst)
    }

    pub fn loaded_segments(&self) -> usize {
        (0..self.index.len()).filter(|&i| self.load_count(i) > 0).count()
    }

    fn segment_value(&self, seg: usize, within: usize) -> Result<bool, SimError> {
        let mut slot = self.slots[seg].lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_none() {
            let entry = self.index[seg];
            let bytes = {
                let mut r = self.reader.lock().unwrap_or_else(|e| e.into_inner());
                r.read_range(&self.section, entry.offset, entry.len)
            }
            .map_err(|e| SimError::RegisterLoad(format!("segment {seg}: {e}")))?;
            if crc32fast::hash(&bytes) != entry.crc {
                return Err(SimError::RegisterLoad(format!("segment {seg}: checksum mismatch")));
            }
            self.loads[seg].fetch_add(1, Ordering::SeqCst);
            *slot = Some(bytes.iter().map(|&b| b != 0).collect());
        }
        Ok(slot.as_ref().expect("loaded above")[within])
    }
}

impl RegisterBank for LazyRegisters {
    fn len(&self) -> usize {
        self.len
    }

    fn read(&self, index: usize) -> Result<bool, SimError> {
        if let Some(&v) = self.overlay.get(&index) {
            return Ok(v);
        }
        self.segment_value(index / SEGMENT_REGS, index % SEGMENT_REGS)
    }

    fn write(&mut self, index: usize, value: bool) {
        self.overlay.insert(index, value);
    }
}

/// Lets a caller keep a handle on the lazy bank after handing it to a device.
impl RegisterBank for Arc<Mutex<LazyRegisters>> {
    fn len(&self) -> usize {
        self.lock().unwrap_or_else(|e| e.into_inner()).len
    }

    fn read(&self, index: usize) -> Result<bool, SimError> {
        self.lock().unwrap_or_else(|e| e.into_inner()).read(index)
    }

    fn write(&mut self, index: usize, value: bool) {
        self.lock().unwrap_or_else(|e| e.into_inner()).write(index, value)
    }
}
