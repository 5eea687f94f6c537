//! Manifest: append-only log of version edits.
//!
//! ```text
//! record   := crc u32 | len u32 | payload
//! payload  := tag u8 | body            tag 1 = snapshot, tag 2 = edit
//! snapshot := next_seq u64 | level_count u32 | (file_count u32 | meta*)*
//! edit     := next_seq u64 | del_count u32 | (level u32, file u64)*
//!             | add_count u32 | (level u32, meta)*
//! meta     := file_number u64 | file_size u64 | record_count u64
//!             | klen u16 min_key | klen u16 max_key
//! ```
//!
//! All integers little-endian, crc over the payload. A full snapshot is
//! written every time the store opens; recovery replays records in order
//! and truncates a torn tail before appending anything new.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{KeyRange, SstMeta};
use crate::version::{Version, VersionEdit};

pub const MANIFEST_NAME: &str = "MANIFEST";

const TAG_SNAPSHOT: u8 = 1;
const TAG_EDIT: u8 = 2;

pub struct Manifest {
    file: File,
    bytes_written: u64,
    sync: bool,
}

/// State recovered from the manifest.
#[derive(Debug, Default)]
pub struct RecoveredState {
    pub version: Version,
    pub next_seq: u64,
}

impl Manifest {
    /// Replay an existing manifest (if any), truncate any torn tail, and
    /// return the handle positioned for appends plus the recovered state.
    pub fn open(dir: &Path, max_levels: usize) -> Result<(Manifest, RecoveredState)> {
        let path = dir.join(MANIFEST_NAME);
        let mut state = RecoveredState { version: Version::new(max_levels), next_seq: 0 };

        let mut data = Vec::new();
        match File::open(&path) {
            Ok(mut f) => {
                f.read_to_end(&mut data)?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }

        let mut off = 0usize;
        while data.len() - off >= 8 {
            let crc = u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
            let len = u32::from_le_bytes(data[off + 4..off + 8].try_into().unwrap()) as usize;
            if off + 8 + len > data.len() {
                break;
            }
            let payload = &data[off + 8..off + 8 + len];
            if crc32fast::hash(payload) != crc {
                break;
            }
            match Self::apply_payload(payload, &mut state, max_levels) {
                Ok(()) => {}
                Err(_) => break,
            }
            off += 8 + len;
        }

        let file = OpenOptions::new().create(true).write(true).open(&path)?;
        file.set_len(off as u64)?;
        let mut m = Manifest { file, bytes_written: 0, sync: true };
        // Position at the truncated end for appends.
        use std::io::Seek;
        m.file.seek(std::io::SeekFrom::End(0))?;
        Ok((m, state))
    }

    fn apply_payload(payload: &[u8], state: &mut RecoveredState, max_levels: usize) -> Result<()> {
        let mut c = Cursor { buf: payload, off: 0 };
        match c.u8()? {
            TAG_SNAPSHOT => {
                let next_seq = c.u64()?;
                let nlevels = c.u32()? as usize;
                let mut version = Version::new(max_levels.max(nlevels));
                for level in version.levels.iter_mut().take(nlevels) {
                    let nfiles = c.u32()? as usize;
                    for _ in 0..nfiles {
                        level.push(c.meta()?);
                    }
                }
                state.version = version;
                state.next_seq = next_seq;
            }
            TAG_EDIT => {
                let edit = decode_edit_body(&mut c)?;
                state.version = state.version.apply(&edit)?;
                state.next_seq = state.next_seq.max(edit.next_seq);
            }
            t => return Err(Error::corruption(format!("unknown manifest tag {t}"))),
        }
        if c.off != payload.len() {
            return Err(Error::corruption("trailing bytes in manifest payload"));
        }
        Ok(())
    }

    pub fn set_sync(&mut self, sync: bool) {
        self.sync = sync;
    }

    pub fn append_snapshot(&mut self, version: &Version, next_seq: u64) -> Result<u64> {
        let mut body = vec![TAG_SNAPSHOT];
        body.extend_from_slice(&next_seq.to_le_bytes());
        body.extend_from_slice(&(version.levels.len() as u32).to_le_bytes());
        for level in &version.levels {
            body.extend_from_slice(&(level.len() as u32).to_le_bytes());
            for m in level {
                encode_meta(&mut body, m);
            }
        }
        self.append_record(&body)
    }

    pub fn append_edit(&mut self, edit: &VersionEdit) -> Result<u64> {
        let mut body = vec![TAG_EDIT];
        body.extend_from_slice(&edit.next_seq.to_le_bytes());
        body.extend_from_slice(&(edit.deleted.len() as u32).to_le_bytes());
        for (level, fno) in &edit.deleted {
            body.extend_from_slice(&(*level as u32).to_le_bytes());
            body.extend_from_slice(&fno.to_le_bytes());
        }
        body.extend_from_slice(&(edit.added.len() as u32).to_le_bytes());
        for (level, meta) in &edit.added {
            body.extend_from_slice(&(*level as u32).to_le_bytes());
            encode_meta(&mut body, meta);
        }
        self.append_record(&body)
    }

    fn append_record(&mut self, payload: &[u8]) -> Result<u64> {
        let mut rec = Vec::with_capacity(payload.len() + 8);
        rec.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        rec.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        rec.extend_from_slice(payload);
        self.file.write_all(&rec)?;
        if self.sync {
            self.file.sync_data()?;
        }
        self.bytes_written += rec.len() as u64;
        Ok(rec.len() as u64)
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_NAME)
    }
}

fn encode_meta(out: &mut Vec<u8>, m: &SstMeta) {
    out.extend_from_slice(&m.file_number.to_le_bytes());
    out.extend_from_slice(&m.file_size.to_le_bytes());
    out.extend_from_slice(&m.record_count.to_le_bytes());
    out.extend_from_slice(&(m.range.min_key.len() as u16).to_le_bytes());
    out.extend_from_slice(&m.range.min_key);
    out.extend_from_slice(&(m.range.max_key.len() as u16).to_le_bytes());
    out.extend_from_slice(&m.range.max_key);
}

fn decode_edit_body(c: &mut Cursor<'_>) -> Result<VersionEdit> {
    let next_seq = c.u64()?;
    let ndel = c.u32()? as usize;
    let mut deleted = Vec::with_capacity(ndel);
    for _ in 0..ndel {
        let level = c.u32()? as usize;
        let fno = c.u64()?;
        deleted.push((level, fno));
    }
    let nadd = c.u32()? as usize;
    let mut added = Vec::with_capacity(nadd);
    for _ in 0..nadd {
        let level = c.u32()? as usize;
        added.push((level, c.meta()?));
    }
    Ok(VersionEdit { deleted, added, next_seq })
}

struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::corruption("manifest payload truncated"));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn meta(&mut self) -> Result<SstMeta> {
        let file_number = self.u64()?;
        let file_size = self.u64()?;
        let record_count = self.u64()?;
        let klen = self.u16()? as usize;
        let min_key = self.take(klen)?.to_vec();
        let klen = self.u16()? as usize;
        let max_key = self.take(klen)?.to_vec();
        Ok(SstMeta { file_number, file_size, record_count, range: KeyRange::new(min_key, max_key) })
    }
}
