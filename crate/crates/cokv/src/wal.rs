//! Write-ahead log.
//!
//! `LOG.wal` is a flat sequence of records:
//!
//! ```text
//! record := crc u32 | seq u64 | kind u8 | klen u16 | vlen u32 | key | value
//! ```
//!
//! All integers little-endian. The CRC32 covers everything after the crc
//! field. The log is the commit point for put/delete: a record is appended
//! and handed to the OS before the operation is acknowledged.
//!
//! When a memtable is sealed the active log is renamed to `LOG.wal.old` and
//! a fresh `LOG.wal` is started for the next memtable; the old log is
//! deleted once the flush has been committed to the manifest. Recovery
//! replays `LOG.wal.old` (if present) then `LOG.wal`, stopping at the first
//! torn or corrupt record.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::types::{InternalRecord, RecordKind};

pub const WAL_NAME: &str = "LOG.wal";
pub const WAL_OLD_NAME: &str = "LOG.wal.old";

const HEADER_LEN: usize = 4 + 8 + 1 + 2 + 4;
// Guard against absurd lengths when scanning a torn tail.
const MAX_KEY_LEN: usize = u16::MAX as usize;
const MAX_VALUE_LEN: usize = 64 << 20;

pub struct WalWriter {
    file: File,
    path: PathBuf,
    buf: Vec<u8>,
    bytes_written: u64,
}

impl WalWriter {
    /// Create (truncate) a fresh log at `dir/LOG.wal`.
    pub fn create(dir: &Path) -> Result<WalWriter> {
        let path = dir.join(WAL_NAME);
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        Ok(WalWriter { file, path, buf: Vec::with_capacity(4096), bytes_written: 0 })
    }

    /// Append one record and push it to the OS. Returns the bytes appended.
    pub fn append(&mut self, rec: &InternalRecord) -> Result<u64> {
        self.buf.clear();
        self.buf.extend_from_slice(&[0u8; 4]); // crc placeholder
        self.buf.extend_from_slice(&rec.seq.to_le_bytes());
        self.buf.push(rec.kind as u8);
        self.buf.extend_from_slice(&(rec.user_key.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(&(rec.value.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(&rec.user_key);
        self.buf.extend_from_slice(&rec.value);
        let crc = crc32fast::hash(&self.buf[4..]);
        self.buf[..4].copy_from_slice(&crc.to_le_bytes());
        self.file.write_all(&self.buf)?;
        self.bytes_written += self.buf.len() as u64;
        Ok(self.buf.len() as u64)
    }

    /// Rename the active log to `LOG.wal.old` and start a fresh one.
    /// The caller must have deleted any previous `LOG.wal.old` first.
    pub fn rotate(&mut self) -> Result<()> {
        let dir = self.path.parent().expect("wal path has a parent").to_path_buf();
        let old = dir.join(WAL_OLD_NAME);
        std::fs::rename(&self.path, &old)?;
        let fresh = WalWriter::create(&dir)?;
        self.file = fresh.file;
        Ok(())
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }
}

/// Replay one log file in append order. Stops silently at a torn or
/// corrupt tail, which is the expected shape after a crash.
pub fn replay(path: &Path) -> Result<Vec<InternalRecord>> {
    let mut data = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut data)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    }

    let mut records = Vec::new();
    let mut off = 0usize;
    while data.len() - off >= HEADER_LEN {
        let crc = u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
        let seq = u64::from_le_bytes(data[off + 4..off + 12].try_into().unwrap());
        let kind = data[off + 12];
        let klen = u16::from_le_bytes(data[off + 13..off + 15].try_into().unwrap()) as usize;
        let vlen = u32::from_le_bytes(data[off + 15..off + 19].try_into().unwrap()) as usize;
        if klen > MAX_KEY_LEN || vlen > MAX_VALUE_LEN {
            break;
        }
        let body_end = off + HEADER_LEN + klen + vlen;
        if body_end > data.len() {
            break;
        }
        if crc32fast::hash(&data[off + 4..body_end]) != crc {
            break;
        }
        let kind = match RecordKind::from_u8(kind) {
            Some(k) => k,
            None => break,
        };
        let key = data[off + HEADER_LEN..off + HEADER_LEN + klen].to_vec();
        let value = data[off + HEADER_LEN + klen..body_end].to_vec();
        records.push(InternalRecord { user_key: key, seq, kind, value });
        off = body_end;
    }
    Ok(records)
}
