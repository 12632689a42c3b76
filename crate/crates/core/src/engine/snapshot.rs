use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::emulator::{Bits, EmulatorState};
use crate::plugin::LockImage;
use crate::runtime::TaskState;
use crate::virt::VirtConfig;

use super::image::{Image, ImageHeader, ImageReader, VERSION};
use super::lazy::{build_index, decode_index, encode_index, LazyRegisters, SharedReader};
use super::{EngineError, ImageSource, ReadSeek};

pub const CORE_SECTIONS: [&str; 8] = [
    "core.tasks",
    "core.locks",
    "core.conns",
    "core.emustate",
    "core.emuregs",
    "core.virt",
    "core.files",
    "core.workload",
];
pub const SEGMENT_INDEX: &str = "core.segidx";
pub const PLUGIN_PREFIX: &str = "plugin.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskImage {
    pub real: u64,
    pub virt: Option<u64>,
    pub entry: String,
    pub state: TaskState,
    pub signals: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnImage {
    pub real: u64,
    pub virt: Option<u64>,
    pub peer: String,
    pub inflight: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileImage {
    pub path: String,
    pub content: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginBlob {
    pub name: String,
    pub optional: bool,
    pub blob: Vec<u8>,
}

/// Everything a checkpoint captures, frozen at the quiescent instant. Encoding
/// it is a pure function, so it can happen on another thread while the
/// workload runs on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessSnapshot {
    pub incarnation: u64,
    pub schedule_hash: u64,
    pub tasks: Vec<TaskImage>,
    pub locks: Vec<LockImage>,
    /// Internal connections only.
    pub conns: Vec<ConnImage>,
    pub emu: EmulatorState,
    pub virt: VirtConfig,
    pub files: Vec<FileImage>,
    pub workload: Vec<u8>,
    pub plugins: Vec<PluginBlob>,
}

fn opt_u64(e: &mut Encoder, v: Option<u64>) {
    match v {
        Some(x) => e.u8(1).u64(x),
        None => e.u8(0),
    };
}

fn read_opt_u64(d: &mut Decoder<'_>) -> Result<Option<u64>, DecodeError> {
    Ok(if d.bool()? { Some(d.u64()?) } else { None })
}

impl ProcessSnapshot {
    pub fn cycle(&self) -> u64 {
        self.emu.cycle
    }

    pub fn to_image(&self, segment_index: bool, timestamp: u64) -> Image {
        let mut sections = Vec::new();

        let mut e = Encoder::new();
        e.u32(self.tasks.len() as u32);
        for t in &self.tasks {
            e.u64(t.real);
            opt_u64(&mut e, t.virt);
            e.str(&t.entry).u8(t.state.code()).u32(t.signals.len() as u32);
            for &s in &t.signals {
                e.u32(s as u32);
            }
        }
        sections.push(("core.tasks".to_string(), e.finish()));

        let mut e = Encoder::new();
        e.u32(self.locks.len() as u32);
        for l in &self.locks {
            e.u64(l.id);
            opt_u64(&mut e, l.owner_real);
            opt_u64(&mut e, l.owner_virtual);
        }
        sections.push(("core.locks".to_string(), e.finish()));

        let mut e = Encoder::new();
        e.u32(self.conns.len() as u32);
        for c in &self.conns {
            e.u64(c.real);
            opt_u64(&mut e, c.virt);
            e.str(&c.peer).bytes(&c.inflight);
        }
        sections.push(("core.conns".to_string(), e.finish()));

        let mut e = Encoder::new();
        e.u64(self.emu.netlist_id)
            .u64(self.emu.cycle)
            .u32(self.emu.regs.len() as u32)
            .bits(&self.emu.last_outputs);
        sections.push(("core.emustate".to_string(), e.finish()));

        let regs: Vec<u8> = self.emu.regs.iter().map(|&b| b as u8).collect();
        if segment_index {
            sections.push((SEGMENT_INDEX.to_string(), encode_index(&build_index(&regs))));
        }
        sections.push(("core.emuregs".to_string(), regs));

        let mut e = Encoder::new();
        self.virt.encode(&mut e);
        sections.push(("core.virt".to_string(), e.finish()));

        let mut e = Encoder::new();
        e.u32(self.files.len() as u32);
        for f in &self.files {
            e.str(&f.path);
            match &f.content {
                Some(c) => e.u8(1).bytes(c),
                None => e.u8(0),
            };
        }
        sections.push(("core.files".to_string(), e.finish()));

        sections.push(("core.workload".to_string(), self.workload.clone()));

        for p in &self.plugins {
            let mut blob = Vec::with_capacity(p.blob.len() + 1);
            blob.push(p.optional as u8);
            blob.extend_from_slice(&p.blob);
            sections.push((format!("{PLUGIN_PREFIX}{}", p.name), blob));
        }

        Image {
            header: ImageHeader {
                version: VERSION,
                incarnation: self.incarnation,
                cycle: self.emu.cycle,
                timestamp,
                schedule_hash: self.schedule_hash,
            },
            sections,
        }
    }

    pub fn encode(&self, segment_index: bool, timestamp: u64) -> Vec<u8> {
        self.to_image(segment_index, timestamp).encode()
    }
}

/// Register contents of a loaded image.
pub enum Registers {
    Eager(Bits),
    Lazy(LazyRegisters),
}

/// A decoded image, with register state either materialized or lazy.
pub struct LoadedImage {
    pub header: ImageHeader,
    pub tasks: Vec<TaskImage>,
    pub locks: Vec<LockImage>,
    pub conns: Vec<ConnImage>,
    pub netlist_id: u64,
    pub last_outputs: Bits,
    pub registers: Registers,
    pub virt: VirtConfig,
    pub files: Vec<FileImage>,
    pub workload: Vec<u8>,
    pub plugins: Vec<PluginBlob>,
    bytes_read: Arc<AtomicU64>,
}

impl LoadedImage {
    /// Image bytes read so far, including later lazy segment loads.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn bytes_counter(&self) -> Arc<AtomicU64> {
        self.bytes_read.clone()
    }

    pub fn cycle(&self) -> u64 {
        self.header.cycle
    }

    pub fn is_lazy(&self) -> bool {
        matches!(self.registers, Registers::Lazy(_))
    }
}

fn dec<T>(section: &str, r: Result<T, DecodeError>) -> Result<T, EngineError> {
    r.map_err(|e| EngineError::Decode {
        section: section.to_string(),
        msg: e.to_string(),
    })
}

/// Opens and validates an image. With `fast`, register segments are left in
/// the image and loaded on first access; an image without a segment index
/// falls back to an eager load.
pub fn load_image(source: &ImageSource, fast: bool) -> Result<LoadedImage, EngineError> {
    let mut reader = source.open()?;
    for name in CORE_SECTIONS {
        if !reader.has(name) {
            return Err(EngineError::MissingSection(name.to_string()));
        }
    }
    let lazy = fast && reader.has(SEGMENT_INDEX);
    if fast && !lazy {
        log::warn!("image has no segment index; restoring eagerly");
    }
    let header = reader.header();
    let bytes_read = reader.counter();
    let names: Vec<String> = reader.entries().iter().map(|e| e.name.clone()).collect();
    let mut raw = std::collections::BTreeMap::new();
    for name in &names {
        if lazy && name == "core.emuregs" {
            continue;
        }
        raw.insert(name.clone(), reader.read_section(name)?);
    }
    let get = |n: &str| raw.get(n).map(Vec::as_slice).unwrap_or(&[]);

    let tasks = dec("core.tasks", (|| {
        let mut d = Decoder::new(get("core.tasks"));
        let n = d.u32()?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let real = d.u64()?;
            let virt = read_opt_u64(&mut d)?;
            let entry = d.string()?;
            let code = d.u8()?;
            let state = TaskState::from_code(code).ok_or(DecodeError::Invalid {
                what: "task state",
                value: code as u64,
            })?;
            let signals = (0..d.u32()?).map(|_| Ok(d.u32()? as i32)).collect::<Result<_, DecodeError>>()?;
            out.push(TaskImage { real, virt, entry, state, signals });
        }
        d.finish()?;
        Ok(out)
    })())?;

    let locks = dec("core.locks", (|| {
        let mut d = Decoder::new(get("core.locks"));
        let n = d.u32()?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            out.push(LockImage {
                id: d.u64()?,
                owner_real: read_opt_u64(&mut d)?,
                owner_virtual: read_opt_u64(&mut d)?,
            });
        }
        d.finish()?;
        Ok(out)
    })())?;

    let conns = dec("core.conns", (|| {
        let mut d = Decoder::new(get("core.conns"));
        let n = d.u32()?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            out.push(ConnImage {
                real: d.u64()?,
                virt: read_opt_u64(&mut d)?,
                peer: d.string()?,
                inflight: d.bytes()?.to_vec(),
            });
        }
        d.finish()?;
        Ok(out)
    })())?;

    let (netlist_id, cycle, nregs, last_outputs) = dec("core.emustate", (|| {
        let mut d = Decoder::new(get("core.emustate"));
        let v = (d.u64()?, d.u64()?, d.u32()? as usize, d.bits()?);
        d.finish()?;
        Ok(v)
    })())?;
    if cycle != header.cycle {
        return Err(EngineError::Decode {
            section: "core.emustate".into(),
            msg: format!("cycle {cycle} disagrees with header cycle {}", header.cycle),
        });
    }

    let registers = if lazy {
        let index = dec(SEGMENT_INDEX, decode_index(get(SEGMENT_INDEX)))?;
        let section = reader.entry("core.emuregs").cloned().expect("checked above");
        let shared: SharedReader = Arc::new(Mutex::new(reader));
        Registers::Lazy(LazyRegisters::new(nregs, shared, section, index)?)
    } else {
        let bytes = get("core.emuregs");
        if bytes.len() != nregs {
            return Err(EngineError::Corrupt("core.emuregs".into()));
        }
        Registers::Eager(bytes.iter().map(|&b| b != 0).collect())
    };

    let virt = dec("core.virt", (|| {
        let mut d = Decoder::new(get("core.virt"));
        let v = VirtConfig::decode(&mut d)?;
        d.finish()?;
        Ok(v)
    })())?;

    let files = dec("core.files", (|| {
        let mut d = Decoder::new(get("core.files"));
        let n = d.u32()?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let path = d.string()?;
            let content = if d.bool()? { Some(d.bytes()?.to_vec()) } else { None };
            out.push(FileImage { path, content });
        }
        d.finish()?;
        Ok(out)
    })())?;

    let mut plugins = Vec::new();
    for name in &names {
        if let Some(plugin) = name.strip_prefix(PLUGIN_PREFIX) {
            let bytes = get(name);
            let (&flag, blob) = bytes
                .split_first()
                .ok_or_else(|| EngineError::Corrupt(name.clone()))?;
            plugins.push(PluginBlob {
                name: plugin.to_string(),
                optional: flag != 0,
                blob: blob.to_vec(),
            });
        }
    }

    Ok(LoadedImage {
        header,
        tasks,
        locks,
        conns,
        netlist_id,
        last_outputs,
        registers,
        virt,
        files,
        workload: get("core.workload").to_vec(),
        plugins,
        bytes_read,
    })
}

/// Opens just the header and section table.
pub fn read_header(source: &ImageSource) -> Result<ImageHeader, EngineError> {
    Ok(source.open()?.header())
}

pub(crate) fn open_reader(source: Box<dyn ReadSeek>) -> Result<ImageReader<Box<dyn ReadSeek>>, EngineError> {
    ImageReader::new(source)
}
