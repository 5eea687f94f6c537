//! SSTable file format.
//!
//! ```text
//! file        := data_block* index_block footer
//! data_block  := record* crc u32                 (crc over the records)
//! record      := klen u16 | vlen u32 | seq u64 | kind u8 | key | value
//! index_block := count u32 | entry* | crc u32
//! entry       := klen u16 | last_key | block_offset u64 | block_len u32
//! footer      := index_offset u64 | index_len u32 | record_count u64 | magic[8]
//! ```
//!
//! All integers little-endian fixed-width. `block_len` includes the block
//! crc. Records are laid out in internal order (user_key ascending, seq
//! descending); data blocks are closed once their payload reaches the
//! configured block size, so one index entry covers roughly `block_size`
//! bytes of records.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::{InternalRecord, KeyFilter, KeyRange, RecordKind, SstMeta};

pub const FOOTER_MAGIC: [u8; 8] = [0xC0, 0x4B, 0x56, 0x4E, 0x44, 0x50, 0x01, 0x00];
pub const FOOTER_LEN: usize = 8 + 4 + 8 + 8;

const RECORD_HEADER_LEN: usize = 2 + 4 + 8 + 1;

/// Streams sorted records into one `.sst` file.
pub struct TableBuilder {
    file: File,
    path: PathBuf,
    file_number: u64,
    block_size: usize,
    sync: bool,
    block_buf: Vec<u8>,
    block_last_key: Vec<u8>,
    index: Vec<IndexEntry>,
    offset: u64,
    data_bytes: u64,
    record_count: u64,
    first_key: Option<Vec<u8>>,
    last_key: Vec<u8>,
    prev: Option<(Vec<u8>, u64)>,
}

#[derive(Debug, Clone)]
struct IndexEntry {
    last_key: Vec<u8>,
    offset: u64,
    len: u32,
}

impl TableBuilder {
    pub fn create(dir: &Path, file_number: u64, block_size: usize, sync: bool) -> Result<Self> {
        let path = dir.join(SstMeta::file_name(file_number));
        let file = OpenOptions::new().create_new(true).write(true).open(&path)?;
        Ok(TableBuilder {
            file,
            path,
            file_number,
            block_size,
            sync,
            block_buf: Vec::with_capacity(block_size + 256),
            block_last_key: Vec::new(),
            index: Vec::new(),
            offset: 0,
            data_bytes: 0,
            record_count: 0,
            first_key: None,
            last_key: Vec::new(),
            prev: None,
        })
    }

    /// Append one record. Input must be strictly increasing in internal
    /// order; a violation aborts the build before the file becomes visible.
    pub fn add(&mut self, rec: &InternalRecord) -> Result<()> {
        if let Some((pk, pseq)) = &self.prev {
            let ord = pk.as_slice().cmp(&rec.user_key).then(rec.seq.cmp(pseq));
            if ord != std::cmp::Ordering::Less {
                return Err(Error::contract(format!(
                    "unsorted record stream: {:?}@{} then {:?}@{}",
                    String::from_utf8_lossy(pk),
                    pseq,
                    String::from_utf8_lossy(&rec.user_key),
                    rec.seq
                )));
            }
        }
        self.prev = Some((rec.user_key.clone(), rec.seq));

        self.block_buf.extend_from_slice(&(rec.user_key.len() as u16).to_le_bytes());
        self.block_buf.extend_from_slice(&(rec.value.len() as u32).to_le_bytes());
        self.block_buf.extend_from_slice(&rec.seq.to_le_bytes());
        self.block_buf.push(rec.kind as u8);
        self.block_buf.extend_from_slice(&rec.user_key);
        self.block_buf.extend_from_slice(&rec.value);

        self.data_bytes += rec.encoded_len() as u64;
        self.record_count += 1;
        if self.first_key.is_none() {
            self.first_key = Some(rec.user_key.clone());
        }
        self.last_key = rec.user_key.clone();
        self.block_last_key = rec.user_key.clone();

        if self.block_buf.len() >= self.block_size {
            self.flush_block()?;
        }
        Ok(())
    }

    fn flush_block(&mut self) -> Result<()> {
        if self.block_buf.is_empty() {
            return Ok(());
        }
        let crc = crc32fast::hash(&self.block_buf);
        self.file.write_all(&self.block_buf)?;
        self.file.write_all(&crc.to_le_bytes())?;
        let len = (self.block_buf.len() + 4) as u32;
        self.index.push(IndexEntry {
            last_key: std::mem::take(&mut self.block_last_key),
            offset: self.offset,
            len,
        });
        self.offset += len as u64;
        self.block_buf.clear();
        Ok(())
    }

    /// Record payload bytes so far; used to split output runs at the
    /// target file size.
    pub fn data_bytes(&self) -> u64 {
        self.data_bytes
    }

    pub fn record_count(&self) -> u64 {
        self.record_count
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn finish(mut self) -> Result<SstMeta> {
        if self.record_count == 0 {
            return Err(Error::contract("cannot finish an empty table"));
        }
        self.flush_block()?;

        let index_offset = self.offset;
        let mut ib = Vec::new();
        ib.extend_from_slice(&(self.index.len() as u32).to_le_bytes());
        for e in &self.index {
            ib.extend_from_slice(&(e.last_key.len() as u16).to_le_bytes());
            ib.extend_from_slice(&e.last_key);
            ib.extend_from_slice(&e.offset.to_le_bytes());
            ib.extend_from_slice(&e.len.to_le_bytes());
        }
        let icrc = crc32fast::hash(&ib);
        ib.extend_from_slice(&icrc.to_le_bytes());
        self.file.write_all(&ib)?;

        let mut footer = Vec::with_capacity(FOOTER_LEN);
        footer.extend_from_slice(&index_offset.to_le_bytes());
        footer.extend_from_slice(&(ib.len() as u32).to_le_bytes());
        footer.extend_from_slice(&self.record_count.to_le_bytes());
        footer.extend_from_slice(&FOOTER_MAGIC);
        self.file.write_all(&footer)?;
        if self.sync {
            self.file.sync_data()?;
        }

        let file_size = index_offset + ib.len() as u64 + FOOTER_LEN as u64;
        Ok(SstMeta {
            file_number: self.file_number,
            file_size,
            record_count: self.record_count,
            range: KeyRange::new(
                self.first_key.expect("non-empty table has a first key"),
                self.last_key,
            ),
        })
    }

    /// Abandon the build and remove the partial file.
    pub fn abort(self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Read handle over one `.sst` file. Block reads are positional, so a
/// single `Table` can serve concurrent readers.
pub struct Table {
    file: File,
    pub meta: SstMeta,
    index: Vec<IndexEntry>,
    read_counter: Option<Arc<AtomicU64>>,
}

impl Table {
    pub fn open(path: &Path, file_number: u64) -> Result<Table> {
        Self::open_counted(path, file_number, None)
    }

    /// Open with a shared counter that accumulates block bytes read.
    pub fn open_counted(
        path: &Path,
        file_number: u64,
        read_counter: Option<Arc<AtomicU64>>,
    ) -> Result<Table> {
        let file = File::open(path)?;
        let file_size = file.metadata()?.len();
        if file_size < FOOTER_LEN as u64 {
            return Err(Error::corruption(format!("{}: too short for a footer", path.display())));
        }
        let mut footer = [0u8; FOOTER_LEN];
        file.read_exact_at(&mut footer, file_size - FOOTER_LEN as u64)?;
        if footer[20..28] != FOOTER_MAGIC {
            return Err(Error::corruption(format!("{}: bad footer magic", path.display())));
        }
        let index_offset = u64::from_le_bytes(footer[0..8].try_into().unwrap());
        let index_len = u32::from_le_bytes(footer[8..12].try_into().unwrap()) as usize;
        let record_count = u64::from_le_bytes(footer[12..20].try_into().unwrap());
        if index_offset + index_len as u64 + FOOTER_LEN as u64 != file_size {
            return Err(Error::corruption(format!("{}: footer geometry mismatch", path.display())));
        }

        let mut ib = vec![0u8; index_len];
        file.read_exact_at(&mut ib, index_offset)?;
        if index_len < 8 {
            return Err(Error::corruption("index block too short"));
        }
        let stored = u32::from_le_bytes(ib[index_len - 4..].try_into().unwrap());
        if crc32fast::hash(&ib[..index_len - 4]) != stored {
            return Err(Error::corruption(format!("{}: index crc mismatch", path.display())));
        }
        let mut index = Vec::new();
        let mut off = 4usize;
        let count = u32::from_le_bytes(ib[0..4].try_into().unwrap()) as usize;
        for _ in 0..count {
            if off + 2 > index_len - 4 {
                return Err(Error::corruption("index entry out of bounds"));
            }
            let klen = u16::from_le_bytes(ib[off..off + 2].try_into().unwrap()) as usize;
            off += 2;
            if off + klen + 12 > index_len - 4 {
                return Err(Error::corruption("index entry out of bounds"));
            }
            let last_key = ib[off..off + klen].to_vec();
            off += klen;
            let offset = u64::from_le_bytes(ib[off..off + 8].try_into().unwrap());
            off += 8;
            let len = u32::from_le_bytes(ib[off..off + 4].try_into().unwrap());
            off += 4;
            index.push(IndexEntry { last_key, offset, len });
        }
        if index.is_empty() {
            return Err(Error::corruption("table has no data blocks"));
        }

        // min key lives in the first record of the first block.
        let mut t = Table {
            file,
            meta: SstMeta {
                file_number,
                file_size,
                record_count,
                range: KeyRange::new(Vec::new(), Vec::new()),
            },
            index,
            read_counter,
        };
        let first = t.read_block(0)?;
        let min_key = first
            .first()
            .ok_or_else(|| Error::corruption("empty first block"))?
            .user_key
            .clone();
        let max_key = t.index.last().unwrap().last_key.clone();
        t.meta.range = KeyRange::new(min_key, max_key);
        Ok(t)
    }

    fn read_block(&self, idx: usize) -> Result<Vec<InternalRecord>> {
        let e = &self.index[idx];
        let mut buf = vec![0u8; e.len as usize];
        self.file.read_exact_at(&mut buf, e.offset)?;
        if let Some(c) = &self.read_counter {
            c.fetch_add(e.len as u64, Ordering::Relaxed);
        }
        if buf.len() < 4 {
            return Err(Error::corruption("block too short"));
        }
        let payload_len = buf.len() - 4;
        let stored = u32::from_le_bytes(buf[payload_len..].try_into().unwrap());
        let computed = crc32fast::hash(&buf[..payload_len]);
        if stored != computed {
            return Err(Error::corruption(format!(
                "block {idx} crc mismatch in {}",
                SstMeta::file_name(self.meta.file_number)
            )));
        }
        let mut records = Vec::new();
        let mut off = 0usize;
        while off < payload_len {
            if off + RECORD_HEADER_LEN > payload_len {
                return Err(Error::corruption("record header out of bounds"));
            }
            let klen = u16::from_le_bytes(buf[off..off + 2].try_into().unwrap()) as usize;
            let vlen = u32::from_le_bytes(buf[off + 2..off + 6].try_into().unwrap()) as usize;
            let seq = u64::from_le_bytes(buf[off + 6..off + 14].try_into().unwrap());
            let kind = RecordKind::from_u8(buf[off + 14])
                .ok_or_else(|| Error::corruption("unknown record kind"))?;
            off += RECORD_HEADER_LEN;
            if off + klen + vlen > payload_len {
                return Err(Error::corruption("record body out of bounds"));
            }
            let user_key = buf[off..off + klen].to_vec();
            off += klen;
            let value = buf[off..off + vlen].to_vec();
            off += vlen;
            records.push(InternalRecord { user_key, seq, kind, value });
        }
        Ok(records)
    }

    /// Newest record for `key`, if this table holds one.
    pub fn get(&self, key: &[u8]) -> Result<Option<InternalRecord>> {
        let idx = self.index.partition_point(|e| e.last_key.as_slice() < key);
        if idx == self.index.len() {
            return Ok(None);
        }
        let records = self.read_block(idx)?;
        // Records are (key asc, seq desc): the first hit is the newest.
        Ok(records.into_iter().find(|r| r.user_key == key))
    }

    /// Iterate records in internal order, restricted to `filter`.
    pub fn iter(self: &Arc<Self>, filter: KeyFilter) -> TableIter {
        let start_block = match &filter.lo {
            Some(lo) => self.index.partition_point(|e| e.last_key.as_slice() < lo.as_slice()),
            None => 0,
        };
        TableIter {
            table: Arc::clone(self),
            filter,
            block_idx: start_block,
            records: Vec::new().into_iter(),
            done: false,
        }
    }
}

pub struct TableIter {
    table: Arc<Table>,
    filter: KeyFilter,
    block_idx: usize,
    records: std::vec::IntoIter<InternalRecord>,
    done: bool,
}

impl Iterator for TableIter {
    type Item = Result<InternalRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            for rec in self.records.by_ref() {
                if let Some(lo) = &self.filter.lo {
                    if rec.user_key.as_slice() < lo.as_slice() {
                        continue;
                    }
                }
                if let Some(hi) = &self.filter.hi {
                    if rec.user_key.as_slice() >= hi.as_slice() {
                        self.done = true;
                        return None;
                    }
                }
                return Some(Ok(rec));
            }
            if self.block_idx >= self.table.index.len() {
                self.done = true;
                return None;
            }
            match self.table.read_block(self.block_idx) {
                Ok(recs) => {
                    self.block_idx += 1;
                    self.records = recs.into_iter();
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

/// Write a sorted record stream into one or more tables, rolling to a new
/// file whenever the record payload reaches `target_size`. On error every
/// file created here is removed.
pub fn write_sorted_run<I>(
    records: I,
    dir: &Path,
    next_file: &mut dyn FnMut() -> Result<u64>,
    target_size: u64,
    block_size: usize,
    sync: bool,
) -> Result<Vec<SstMeta>>
where
    I: Iterator<Item = Result<InternalRecord>>,
{
    let mut outputs: Vec<SstMeta> = Vec::new();
    let mut builder: Option<TableBuilder> = None;

    let fail = |outputs: &[SstMeta], builder: Option<TableBuilder>, dir: &Path, e: Error| {
        if let Some(b) = builder {
            b.abort();
        }
        for m in outputs {
            let _ = std::fs::remove_file(m.path_in(dir));
        }
        e
    };

    for rec in records {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => return Err(fail(&outputs, builder, dir, e)),
        };
        if builder.is_none() {
            let fno = match next_file() {
                Ok(n) => n,
                Err(e) => return Err(fail(&outputs, builder, dir, e)),
            };
            match TableBuilder::create(dir, fno, block_size, sync) {
                Ok(b) => builder = Some(b),
                Err(e) => return Err(fail(&outputs, builder, dir, e)),
            }
        }
        let b = builder.as_mut().unwrap();
        if let Err(e) = b.add(&rec) {
            return Err(fail(&outputs, builder, dir, e));
        }
        if b.data_bytes() >= target_size {
            match builder.take().unwrap().finish() {
                Ok(meta) => outputs.push(meta),
                Err(e) => return Err(fail(&outputs, None, dir, e)),
            }
        }
    }
    if let Some(b) = builder.take() {
        match b.finish() {
            Ok(meta) => outputs.push(meta),
            Err(e) => return Err(fail(&outputs, None, dir, e)),
        }
    }
    Ok(outputs)
}

/// Cache of open tables keyed by file number. Small and blunt: when full
/// it drops everything and reopens on demand; outstanding `Arc<Table>`
/// handles keep working.
pub struct TableCache {
    dir: PathBuf,
    map: Mutex<HashMap<u64, Arc<Table>>>,
    cap: usize,
}

impl TableCache {
    pub fn new(dir: PathBuf, cap: usize) -> TableCache {
        TableCache { dir, map: Mutex::new(HashMap::new()), cap }
    }

    pub fn get(&self, meta: &SstMeta) -> Result<Arc<Table>> {
        {
            let map = self.map.lock();
            if let Some(t) = map.get(&meta.file_number) {
                return Ok(Arc::clone(t));
            }
        }
        let t = Arc::new(Table::open(&meta.path_in(&self.dir), meta.file_number)?);
        let mut map = self.map.lock();
        if map.len() >= self.cap {
            map.clear();
        }
        map.insert(meta.file_number, Arc::clone(&t));
        Ok(t)
    }

    pub fn evict(&self, file_number: u64) {
        self.map.lock().remove(&file_number);
    }
}
