//! A small versioned binary container for named numeric artifacts.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic   : 4 bytes, "NULU"
//! version : u16, currently 1
//! count   : u32, number of entries
//! entry*  : name_len u16 | name bytes (ASCII) | kind u8 | payload
//! crc32   : u32 over every preceding byte
//! ```
//!
//! Payloads by kind:
//!
//! - `0` matrix: `rows u64 | cols u64 | rows*cols f64` (row-major)
//! - `1` int list: `count u64 | count i64`
//! - `2` string: `len u64 | len UTF-8 bytes`
//!
//! Entry names are unique, non-empty ASCII. Writes are atomic (temp file
//! plus rename), and loads verify the checksum before any parsing.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

const MAGIC: &[u8; 4] = b"NULU";
const VERSION: u16 = 1;

const KIND_MATRIX: u8 = 0;
const KIND_INT_LIST: u8 = 1;
const KIND_STRING: u8 = 2;

/// One stored value.
#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    Matrix(DenseMatrix),
    IntList(Vec<i64>),
    Text(String),
}

/// An ordered collection of uniquely named blobs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Blob)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Adds an entry. Names must be non-empty ASCII of at most 65535 bytes
    /// and unique within the container.
    pub fn insert(&mut self, name: &str, blob: Blob) -> Result<()> {
        if name.is_empty() || !name.is_ascii() || name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "entry name must be non-empty ASCII (got {name:?})"
            )));
        }
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate entry name {name:?}"
            )));
        }
        self.entries.push((name.to_string(), blob));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Fetches a matrix entry, failing with [`Error::MissingEntry`] when
    /// absent and [`Error::InvalidArgument`] on a kind mismatch.
    pub fn matrix(&self, name: &str) -> Result<&DenseMatrix> {
        match self.get(name) {
            Some(Blob::Matrix(m)) => Ok(m),
            Some(_) => Err(Error::InvalidArgument(format!(
                "entry {name:?} is not a matrix"
            ))),
            None => Err(Error::MissingEntry(name.to_string())),
        }
    }

    /// Fetches an int-list entry; same error contract as [`Self::matrix`].
    pub fn int_list(&self, name: &str) -> Result<&[i64]> {
        match self.get(name) {
            Some(Blob::IntList(v)) => Ok(v),
            Some(_) => Err(Error::InvalidArgument(format!(
                "entry {name:?} is not an int list"
            ))),
            None => Err(Error::MissingEntry(name.to_string())),
        }
    }

    /// Fetches a string entry; same error contract as [`Self::matrix`].
    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Blob::Text(s)) => Ok(s),
            Some(_) => Err(Error::InvalidArgument(format!(
                "entry {name:?} is not a string"
            ))),
            None => Err(Error::MissingEntry(name.to_string())),
        }
    }

    /// Serializes to the documented byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, blob) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match blob {
                Blob::Matrix(m) => {
                    out.push(KIND_MATRIX);
                    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
                    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Blob::IntList(values) => {
                    out.push(KIND_INT_LIST);
                    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Blob::Text(s) => {
                    out.push(KIND_STRING);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses the documented byte layout, verifying the trailing checksum
    /// first and rejecting truncation, trailing garbage, duplicate names,
    /// unknown kinds, and non-finite matrix entries.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(Error::CorruptContainer("file too short".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::CorruptContainer(format!(
                "checksum mismatch (stored {stored:#010x}, computed {computed:#010x})"
            )));
        }

        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptContainer("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::CorruptContainer(format!(
                "unsupported version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut container = Container::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::CorruptContainer("entry name is not UTF-8".into()))?
                .to_string();
            if name.is_empty() || !name.is_ascii() {
                return Err(Error::CorruptContainer(format!(
                    "invalid entry name {name:?}"
                )));
            }
            let kind = r.u8()?;
            let blob = match kind {
                KIND_MATRIX => {
                    let rows = r.usize64()?;
                    let cols = r.usize64()?;
                    let n = rows
                        .checked_mul(cols)
                        .ok_or_else(|| Error::CorruptContainer("matrix size overflow".into()))?;
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        data.push(r.f64()?);
                    }
                    let m = DenseMatrix::new(rows, cols, data).map_err(|e| {
                        Error::CorruptContainer(format!("invalid stored matrix: {e}"))
                    })?;
                    Blob::Matrix(m)
                }
                KIND_INT_LIST => {
                    let n = r.usize64()?;
                    let mut values = Vec::with_capacity(n.min(1 << 20));
                    for _ in 0..n {
                        values.push(r.i64()?);
                    }
                    Blob::IntList(values)
                }
                KIND_STRING => {
                    let n = r.usize64()?;
                    let raw = r.take(n)?;
                    let s = std::str::from_utf8(raw)
                        .map_err(|_| Error::CorruptContainer("string entry is not UTF-8".into()))?;
                    Blob::Text(s.to_string())
                }
                other => {
                    return Err(Error::CorruptContainer(format!(
                        "unknown entry kind {other}"
                    )))
                }
            };
            container
                .insert(&name, blob)
                .map_err(|e| Error::CorruptContainer(format!("{e}")))?;
        }
        if r.pos != body.len() {
            return Err(Error::CorruptContainer(format!(
                "{} trailing bytes after last entry",
                body.len() - r.pos
            )));
        }
        Ok(container)
    }

    /// Writes the container atomically: the bytes land in a temporary file
    /// in the destination directory which is then renamed over the target.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        atomic_write(path, &bytes)
    }

    /// Loads and verifies a container from disk.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Atomically replaces `path` with `bytes` via a sibling temporary file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptContainer("truncated entry data".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    /// A u64 length field narrowed to usize with an overflow check.
    fn usize64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::CorruptContainer("length field overflow".into()))
    }
}
