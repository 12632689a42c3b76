//! Checkpoint images: capture, the sectioned on-disk format, background
//! (forked) writing, eager and lazy loading, and lock-owner patching.

mod image;
mod lazy;
mod locks;
mod policy;
mod snapshot;

use std::fs;
use std::io::{self, Cursor, Read, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use thiserror::Error;

pub use image::{
    equal_modulo_timestamp, CountingReader, Image, ImageHeader, ImageReader, SectionEntry, ENTRY_LEN,
    HEADER_LEN, MAGIC, TIMESTAMP_RANGE, VERSION,
};
pub use lazy::{LazyRegisters, SegmentEntry, SEGMENT_REGS};
pub use locks::patch_locks;
pub use policy::{FilePolicy, FileRule};
pub use snapshot::{
    load_image, read_header, ConnImage, FileImage, LoadedImage, PluginBlob, ProcessSnapshot, Registers,
    TaskImage, CORE_SECTIONS, PLUGIN_PREFIX, SEGMENT_INDEX,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("not a checkpoint image (bad magic)")]
    BadMagic,
    #[error("unsupported image version {0}")]
    Version(u32),
    #[error("image truncated in {0}")]
    Truncated(String),
    #[error("section {0} overlaps another section")]
    Overlap(String),
    #[error("section {0} failed its checksum")]
    Corrupt(String),
    #[error("image has no {0} section")]
    MissingSection(String),
    #[error("section {section}: {msg}")]
    Decode { section: String, msg: String },
    #[error("runtime is not quiescent")]
    NotQuiescent,
    #[error("background write panicked")]
    WriterPanicked,
}

impl From<io::Error> for EngineError {
    fn from(e: io::Error) -> Self {
        EngineError::Io(e.to_string())
    }
}

pub trait ReadSeek: Read + Seek + Send {}
impl<T: Read + Seek + Send> ReadSeek for T {}

/// Where an image comes from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Bytes(Arc<[u8]>),
}

impl ImageSource {
    pub fn open(&self) -> Result<ImageReader<Box<dyn ReadSeek>>, EngineError> {
        let inner: Box<dyn ReadSeek> = match self {
            ImageSource::Path(p) => Box::new(io::BufReader::new(fs::File::open(p)?)),
            ImageSource::Bytes(b) => Box::new(Cursor::new(b.clone())),
        };
        snapshot::open_reader(inner)
    }

    pub fn bytes(&self) -> Result<Vec<u8>, EngineError> {
        match self {
            ImageSource::Path(p) => Ok(fs::read(p)?),
            ImageSource::Bytes(b) => Ok(b.to_vec()),
        }
    }
}

impl From<Vec<u8>> for ImageSource {
    fn from(v: Vec<u8>) -> Self {
        ImageSource::Bytes(v.into())
    }
}

impl From<&Path> for ImageSource {
    fn from(p: &Path) -> Self {
        ImageSource::Path(p.to_path_buf())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSummary {
    pub path: PathBuf,
    pub incarnation: u64,
    pub cycle: u64,
    pub bytes: u64,
    pub sections: Vec<(String, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub segment_index: bool,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self { segment_index: true }
    }
}

/// Encodes `snap` and writes it atomically: a temporary file is renamed into
/// place, and removed if anything fails.
pub fn write_image(snap: &ProcessSnapshot, dest: &Path, opts: WriteOptions) -> Result<ImageSummary, EngineError> {
    let image = snap.to_image(opts.segment_index, crate::clock::wall_nanos());
    let bytes = image.encode();
    let mut tmp = dest.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = (|| -> io::Result<()> {
        if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, dest)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(ImageSummary {
        path: dest.to_path_buf(),
        incarnation: image.header.incarnation,
        cycle: image.header.cycle,
        bytes: bytes.len() as u64,
        sections: image
            .sections
            .iter()
            .map(|(n, b)| (n.clone(), b.len() as u64))
            .collect(),
    })
}

type WriteResult = Result<ImageSummary, EngineError>;

/// Handle on a background image write.
#[derive(Clone)]
pub struct ForkTicket {
    state: Arc<Mutex<TicketState>>,
    pub cycle: u64,
    pub path: PathBuf,
}

enum TicketState {
    Running(JoinHandle<WriteResult>),
    Done(WriteResult),
}

impl ForkTicket {
    /// Blocks until the write has finished.
    pub fn wait(&self) -> WriteResult {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if let TicketState::Running(_) = &*st {
            let TicketState::Running(h) = std::mem::replace(&mut *st, TicketState::Done(Err(EngineError::WriterPanicked)))
            else {
                unreachable!()
            };
            *st = TicketState::Done(h.join().unwrap_or(Err(EngineError::WriterPanicked)));
        }
        match &*st {
            TicketState::Done(r) => r.clone(),
            TicketState::Running(_) => unreachable!(),
        }
    }

    pub fn is_finished(&self) -> bool {
        match &*self.state.lock().unwrap_or_else(|e| e.into_inner()) {
            TicketState::Done(_) => true,
            TicketState::Running(h) => h.is_finished(),
        }
    }
}

/// Writes snapshots on a background thread, one at a time: a new write
/// starts only after the previous one has finished.
#[derive(Default)]
pub struct ForkedWriter {
    last: Mutex<Option<ForkTicket>>,
}

impl ForkedWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit(&self, snap: ProcessSnapshot, dest: PathBuf, opts: WriteOptions) -> ForkTicket {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = last.take() {
            let _ = prev.wait();
        }
        let cycle = snap.cycle();
        let path = dest.clone();
        let handle = std::thread::spawn(move || write_image(&snap, &dest, opts));
        let ticket = ForkTicket {
            state: Arc::new(Mutex::new(TicketState::Running(handle))),
            cycle,
            path,
        };
        *last = Some(ticket.clone());
        ticket
    }

    pub fn wait_all(&self) -> Option<WriteResult> {
        let last = self.last.lock().unwrap_or_else(|e| e.into_inner()).clone();
        last.map(|t| t.wait())
    }
}
