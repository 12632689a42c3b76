use std::io::{self, Read, Seek, SeekFrom};
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::EngineError;

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;
pub const ENTRY_LEN: usize = 84;
pub const NAME_LEN: usize = 64;
/// Byte range of the header timestamp, the only field that differs between
/// two images of the same state.
pub const TIMESTAMP_RANGE: Range<usize> = 24..32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImageHeader {
    pub version: u32,
    pub incarnation: u64,
    pub cycle: u64,
    pub timestamp: u64,
    pub schedule_hash: u64,
}

impl ImageHeader {
    fn encode(&self, sections: u32) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(MAGIC);
        h[4..8].copy_from_slice(&self.version.to_le_bytes());
        h[8..16].copy_from_slice(&self.incarnation.to_le_bytes());
        h[16..24].copy_from_slice(&self.cycle.to_le_bytes());
        h[24..32].copy_from_slice(&self.timestamp.to_le_bytes());
        h[32..40].copy_from_slice(&self.schedule_hash.to_le_bytes());
        h[40..44].copy_from_slice(&sections.to_le_bytes());
        h
    }

    fn decode(h: &[u8; HEADER_LEN]) -> Result<(Self, u32), EngineError> {
        if &h[0..4] != MAGIC {
            return Err(EngineError::BadMagic);
        }
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(h[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(EngineError::Version(version));
        }
        Ok((
            ImageHeader {
                version,
                incarnation: u64_at(8),
                cycle: u64_at(16),
                timestamp: u64_at(24),
                schedule_hash: u64_at(32),
            },
            u32_at(40),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub crc: u32,
}

/// A fully materialized image: header plus named sections in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub header: ImageHeader,
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Image {
    pub fn section(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn encode(&self) -> Vec<u8> {
        let table_len = self.sections.len() * ENTRY_LEN;
        let mut offset = (HEADER_LEN + table_len) as u64;
        let mut out = Vec::with_capacity(offset as usize + self.sections.iter().map(|s| s.1.len()).sum::<usize>());
        out.extend_from_slice(&self.header.encode(self.sections.len() as u32));
        for (name, bytes) in &self.sections {
            let mut field = [0u8; NAME_LEN];
            let n = name.len().min(NAME_LEN);
            field[..n].copy_from_slice(&name.as_bytes()[..n]);
            out.extend_from_slice(&field);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(bytes).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, bytes) in &self.sections {
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EngineError> {
        let mut r = ImageReader::new(io::Cursor::new(bytes))?;
        let header = r.header();
        let names: Vec<String> = r.entries().iter().map(|e| e.name.clone()).collect();
        let sections = names
            .into_iter()
            .map(|n| {
                let b = r.read_section(&n)?;
                Ok((n, b))
            })
            .collect::<Result<_, EngineError>>()?;
        Ok(Image { header, sections })
    }
}

/// Equality of two encoded images outside the header timestamp.
pub fn equal_modulo_timestamp(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len()
        && a.len() >= HEADER_LEN
        && a[..TIMESTAMP_RANGE.start] == b[..TIMESTAMP_RANGE.start]
        && a[TIMESTAMP_RANGE.end..] == b[TIMESTAMP_RANGE.end..]
}

/// Counts every byte pulled through it.
pub struct CountingReader<R> {
    inner: R,
    count: Arc<AtomicU64>,
}

impl<R> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            count: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn counter(&self) -> Arc<AtomicU64> {
        self.count.clone()
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count.fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }
}

impl<R: Seek> Seek for CountingReader<R> {
    fn seek(&mut self, pos: SeekFrom) -> io::Result<u64> {
        self.inner.seek(pos)
    }
}

/// Random access to the sections of an encoded image. Opening reads only the
/// header and the section table, and checks that every section lies inside
/// the file and that no two overlap.
pub struct ImageReader<R> {
    inner: CountingReader<R>,
    header: ImageHeader,
    entries: Vec<SectionEntry>,
}

impl<R: Read + Seek> ImageReader<R> {
    pub fn new(source: R) -> Result<Self, EngineError> {
        let mut inner = CountingReader::new(source);
        let file_len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut h = [0u8; HEADER_LEN];
        read_exact(&mut inner, &mut h, "header")?;
        let (header, count) = ImageHeader::decode(&h)?;
        let table_end = HEADER_LEN as u64 + count as u64 * ENTRY_LEN as u64;
        if table_end > file_len {
            return Err(EngineError::Truncated("section table".into()));
        }
        let mut table = vec![0u8; count as usize * ENTRY_LEN];
        read_exact(&mut inner, &mut table, "section table")?;
        let mut entries = Vec::with_capacity(count as usize);
        for raw in table.chunks_exact(ENTRY_LEN) {
            let name_field = &raw[..NAME_LEN];
            let end = name_field.iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
            let name = std::str::from_utf8(&name_field[..end])
                .map_err(|_| EngineError::Corrupt("section name".into()))?
                .to_string();
            let offset = u64::from_le_bytes(raw[64..72].try_into().expect("8 bytes"));
            let length = u64::from_le_bytes(raw[72..80].try_into().expect("8 bytes"));
            let crc = u32::from_le_bytes(raw[80..84].try_into().expect("4 bytes"));
            let end = offset
                .checked_add(length)
                .ok_or_else(|| EngineError::Corrupt(name.clone()))?;
            if offset < table_end || end > file_len {
                return Err(EngineError::Truncated(name));
            }
            entries.push(SectionEntry { name, offset, length, crc });
        }
        let mut spans: Vec<(u64, u64, &str)> = entries
            .iter()
            .map(|e| (e.offset, e.offset + e.length, e.name.as_str()))
            .collect();
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(EngineError::Overlap(w[1].2.to_string()));
            }
        }
        Ok(Self { inner, header, entries })
    }

    pub fn header(&self) -> ImageHeader {
        self.header
    }

    pub fn entries(&self) -> &[SectionEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&SectionEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    pub fn bytes_read(&self) -> u64 {
        self.inner.count.load(Ordering::Relaxed)
    }

    pub fn counter(&self) -> Arc<AtomicU64> {
        self.inner.counter()
    }

    /// Whole section, CRC-checked.
    pub fn read_section(&mut self, name: &str) -> Result<Vec<u8>, EngineError> {
        let e = self
            .entry(name)
            .cloned()
            .ok_or_else(|| EngineError::MissingSection(name.to_string()))?;
        let bytes = self.read_range(&e, 0, e.length)?;
        if crc32fast::hash(&bytes) != e.crc {
            return Err(EngineError::Corrupt(name.to_string()));
        }
        Ok(bytes)
    }

    /// Raw bytes `[start, start+len)` inside a section; no CRC check.
    pub fn read_range(&mut self, entry: &SectionEntry, start: u64, len: u64) -> Result<Vec<u8>, EngineError> {
        if start + len > entry.length {
            return Err(EngineError::Truncated(entry.name.clone()));
        }
        self.inner.seek(SeekFrom::Start(entry.offset + start))?;
        let mut buf = vec![0u8; len as usize];
        read_exact(&mut self.inner, &mut buf, &entry.name)?;
        Ok(buf)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), EngineError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EngineError::Truncated(what.to_string()),
        _ => EngineError::Io(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        Image {
            header: ImageHeader {
                version: VERSION,
                incarnation: 2,
                cycle: 50,
                timestamp: 1234,
                schedule_hash: 99,
            },
            sections: vec![
                ("core.tasks".into(), vec![1, 2, 3]),
                ("core.empty".into(), vec![]),
                ("plugin.x".into(), b"hello".to_vec()),
            ],
        }
    }

    #[test]
    fn layout_is_fixed() {
        let bytes = sample().encode();
        assert_eq!(&bytes[0..4], b"CKPT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 50);
        assert_eq!(u64::from_le_bytes(bytes[TIMESTAMP_RANGE].try_into().unwrap()), 1234);
        assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 3);
        assert_eq!(&bytes[44..54], b"core.tasks");
        let first_data = (HEADER_LEN + 3 * ENTRY_LEN) as u64;
        assert_eq!(u64::from_le_bytes(bytes[108..116].try_into().unwrap()), first_data);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * ENTRY_LEN + 8);
    }

    #[test]
    fn round_trip_and_timestamp_masking() {
        let img = sample();
        let a = img.encode();
        assert_eq!(Image::decode(&a).unwrap(), img);
        let mut later = img.clone();
        later.header.timestamp = 777;
        let b = later.encode();
        assert_ne!(a, b);
        assert!(equal_modulo_timestamp(&a, &b));
        later.header.cycle = 51;
        assert!(!equal_modulo_timestamp(&a, &later.encode()));
    }

    #[test]
    fn corruption_and_truncation_detected() {
        let bytes = sample().encode();
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert_eq!(Image::decode(&flipped), Err(EngineError::Corrupt("plugin.x".into())));
        assert_eq!(
            Image::decode(&bytes[..bytes.len() - 2]),
            Err(EngineError::Truncated("plugin.x".into()))
        );
        assert_eq!(Image::decode(&bytes[..20]), Err(EngineError::Truncated("header".into())));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(Image::decode(&magic), Err(EngineError::BadMagic));
    }

    #[test]
    fn reader_counts_bytes() {
        let bytes = sample().encode();
        let mut r = ImageReader::new(io::Cursor::new(&bytes)).unwrap();
        let after_open = r.bytes_read();
        assert_eq!(after_open, (HEADER_LEN + 3 * ENTRY_LEN) as u64);
        r.read_section("plugin.x").unwrap();
        assert_eq!(r.bytes_read(), after_open + 5);
    }
}
