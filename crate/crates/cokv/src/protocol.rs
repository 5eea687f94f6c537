//! Semantic message protocol between the host managers and the device.
//!
//! ```text
//! frame   := body_len u32 | body | crc u32          (crc over body)
//! body    := msg_type u8 | compaction_id u64 | payload
//! ```
//!
//! All integers little-endian. `body_len` covers the body only, not the
//! trailing crc, so the smallest frame (HELLO with empty payload) is
//! 4 + 1 + 8 + 4 = 17 bytes. Sessions open with a mutual HELLO whose id
//! field carries the protocol version; version 0 in a reply means the peer
//! refused the session.
//!
//! Payloads:
//! - COMPACT_REQUEST: device split task + pre-allocated file-number block
//!   + database path + merge parameters.
//! - COMPACT_DONE: new file metadata, bytes written, device elapsed time.
//! - COMPACT_ERROR: numeric code + text.
//! - HELLO / SHUTDOWN: empty.

use std::io::{Read, Write};

use crate::error::ProtocolError;
use crate::offload::{SplitTask, TaskSide};
use crate::types::{KeyFilter, KeyRange, SstMeta};

pub const PROTOCOL_VERSION: u64 = 1;

/// Largest body we will accept; metadata-only traffic stays far below this.
pub const MAX_BODY_LEN: usize = 16 << 20;

pub const TYPE_HELLO: u8 = 1;
pub const TYPE_COMPACT_REQUEST: u8 = 2;
pub const TYPE_COMPACT_DONE: u8 = 3;
pub const TYPE_COMPACT_ERROR: u8 = 4;
pub const TYPE_SHUTDOWN: u8 = 5;

/// Device-side error codes carried by COMPACT_ERROR.
pub mod error_code {
    pub const MISSING_INPUT: u32 = 1;
    pub const IO: u32 = 2;
    pub const FILE_BLOCK_EXHAUSTED: u32 = 3;
    pub const CORRUPTION: u32 = 4;
    pub const CONTRACT: u32 = 5;
    pub const DB_UNREADABLE: u32 = 6;
}

#[derive(Debug, Clone, PartialEq)]
pub enum SemanticMessage {
    /// `version` travels in the compaction_id field; payload stays empty.
    Hello { version: u64 },
    CompactRequest(DeviceRequest),
    CompactDone {
        compaction_id: u64,
        files: Vec<SstMeta>,
        bytes_written: u64,
        device_elapsed_us: u64,
    },
    CompactError {
        compaction_id: u64,
        code: u32,
        message: String,
    },
    Shutdown,
}

/// Everything the device needs to run its half of a compaction.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRequest {
    pub task: SplitTask,
    pub file_number_start: u64,
    pub file_number_count: u32,
    pub db_path: String,
    pub drop_tombstones: bool,
    pub target_file_size: u64,
    pub block_size: u32,
}

pub fn encode_message(msg: &SemanticMessage) -> Vec<u8> {
    let (msg_type, compaction_id) = match msg {
        SemanticMessage::Hello { version } => (TYPE_HELLO, *version),
        SemanticMessage::CompactRequest(r) => (TYPE_COMPACT_REQUEST, r.task.compaction_id),
        SemanticMessage::CompactDone { compaction_id, .. } => (TYPE_COMPACT_DONE, *compaction_id),
        SemanticMessage::CompactError { compaction_id, .. } => (TYPE_COMPACT_ERROR, *compaction_id),
        SemanticMessage::Shutdown => (TYPE_SHUTDOWN, 0),
    };

    let mut body = Vec::with_capacity(64);
    body.push(msg_type);
    body.extend_from_slice(&compaction_id.to_le_bytes());
    match msg {
        SemanticMessage::Hello { .. } | SemanticMessage::Shutdown => {}
        SemanticMessage::CompactRequest(r) => {
            body.push(match r.task.side {
                TaskSide::Host => 0,
                TaskSide::Device => 1,
            });
            put_opt_bytes(&mut body, r.task.key_filter.lo.as_deref());
            put_opt_bytes(&mut body, r.task.key_filter.hi.as_deref());
            body.extend_from_slice(&(r.task.target_level as u32).to_le_bytes());
            put_meta_list(&mut body, &r.task.inputs_k);
            put_meta_list(&mut body, &r.task.inputs_k1);
            body.extend_from_slice(&r.file_number_start.to_le_bytes());
            body.extend_from_slice(&r.file_number_count.to_le_bytes());
            put_bytes(&mut body, r.db_path.as_bytes());
            body.push(u8::from(r.drop_tombstones));
            body.extend_from_slice(&r.target_file_size.to_le_bytes());
            body.extend_from_slice(&r.block_size.to_le_bytes());
        }
        SemanticMessage::CompactDone { files, bytes_written, device_elapsed_us, .. } => {
            put_meta_list(&mut body, files);
            body.extend_from_slice(&bytes_written.to_le_bytes());
            body.extend_from_slice(&device_elapsed_us.to_le_bytes());
        }
        SemanticMessage::CompactError { code, message, .. } => {
            body.extend_from_slice(&code.to_le_bytes());
            put_bytes(&mut body, message.as_bytes());
        }
    }

    let mut frame = Vec::with_capacity(body.len() + 8);
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(&body);
    frame.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    frame
}

/// Decode one frame from the front of `buf`; returns the message and the
/// bytes consumed. `Incomplete` asks the caller to wait for more bytes.
pub fn decode_message(buf: &[u8]) -> Result<(SemanticMessage, usize), ProtocolError> {
    if buf.len() < 4 {
        return Err(ProtocolError::Incomplete { needed: 4 - buf.len() });
    }
    let body_len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::Oversize(body_len));
    }
    if body_len < 9 {
        return Err(ProtocolError::Malformed(format!("body length {body_len} below header size")));
    }
    let frame_len = 4 + body_len + 4;
    if buf.len() < frame_len {
        return Err(ProtocolError::Incomplete { needed: frame_len - buf.len() });
    }
    let body = &buf[4..4 + body_len];
    let stored = u32::from_le_bytes(buf[4 + body_len..frame_len].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ProtocolError::CrcMismatch { stored, computed });
    }

    let msg_type = body[0];
    let compaction_id = u64::from_le_bytes(body[1..9].try_into().unwrap());
    let mut c = Cursor { buf: body, off: 9 };
    let msg = match msg_type {
        TYPE_HELLO => SemanticMessage::Hello { version: compaction_id },
        TYPE_SHUTDOWN => SemanticMessage::Shutdown,
        TYPE_COMPACT_REQUEST => {
            let side = match c.u8()? {
                0 => TaskSide::Host,
                1 => TaskSide::Device,
                s => return Err(ProtocolError::Malformed(format!("bad task side {s}"))),
            };
            let lo = c.opt_bytes()?;
            let hi = c.opt_bytes()?;
            let target_level = c.u32()? as usize;
            let inputs_k = c.meta_list()?;
            let inputs_k1 = c.meta_list()?;
            let file_number_start = c.u64()?;
            let file_number_count = c.u32()?;
            let db_path = String::from_utf8(c.bytes()?)
                .map_err(|_| ProtocolError::Malformed("db path is not utf-8".into()))?;
            let drop_tombstones = c.u8()? != 0;
            let target_file_size = c.u64()?;
            let block_size = c.u32()?;
            SemanticMessage::CompactRequest(DeviceRequest {
                task: SplitTask {
                    side,
                    key_filter: KeyFilter { lo, hi },
                    inputs_k,
                    inputs_k1,
                    target_level,
                    compaction_id,
                },
                file_number_start,
                file_number_count,
                db_path,
                drop_tombstones,
                target_file_size,
                block_size,
            })
        }
        TYPE_COMPACT_DONE => {
            let files = c.meta_list()?;
            let bytes_written = c.u64()?;
            let device_elapsed_us = c.u64()?;
            SemanticMessage::CompactDone { compaction_id, files, bytes_written, device_elapsed_us }
        }
        TYPE_COMPACT_ERROR => {
            let code = c.u32()?;
            let message = String::from_utf8_lossy(&c.bytes()?).into_owned();
            SemanticMessage::CompactError { compaction_id, code, message }
        }
        t => return Err(ProtocolError::UnknownType(t)),
    };
    if c.off != body.len() {
        return Err(ProtocolError::Malformed(format!(
            "{} trailing payload bytes",
            body.len() - c.off
        )));
    }
    Ok((msg, frame_len))
}

/// Blocking read of one complete frame. Returns the message and the frame
/// size on the wire.
pub fn read_message(stream: &mut impl Read) -> crate::Result<(SemanticMessage, u64)> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let body_len = u32::from_le_bytes(len_buf) as usize;
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::Oversize(body_len).into());
    }
    let mut frame = vec![0u8; 4 + body_len + 4];
    frame[0..4].copy_from_slice(&len_buf);
    stream.read_exact(&mut frame[4..])?;
    let (msg, consumed) = decode_message(&frame)?;
    debug_assert_eq!(consumed, frame.len());
    Ok((msg, frame.len() as u64))
}

/// Blocking write of one frame; returns the bytes put on the wire.
pub fn write_message(stream: &mut impl Write, msg: &SemanticMessage) -> crate::Result<u64> {
    let frame = encode_message(msg);
    stream.write_all(&frame)?;
    stream.flush()?;
    Ok(frame.len() as u64)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u16).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_opt_bytes(out: &mut Vec<u8>, b: Option<&[u8]>) {
    match b {
        Some(b) => {
            out.push(1);
            put_bytes(out, b);
        }
        None => out.push(0),
    }
}

fn put_meta(out: &mut Vec<u8>, m: &SstMeta) {
    out.extend_from_slice(&m.file_number.to_le_bytes());
    out.extend_from_slice(&m.file_size.to_le_bytes());
    out.extend_from_slice(&m.record_count.to_le_bytes());
    put_bytes(out, &m.range.min_key);
    put_bytes(out, &m.range.max_key);
}

fn put_meta_list(out: &mut Vec<u8>, list: &[SstMeta]) {
    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for m in list {
        put_meta(out, m);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ProtocolError> {
        if self.off + n > self.buf.len() {
            return Err(ProtocolError::Malformed("payload truncated".into()));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, ProtocolError> {
        let n = self.u16()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn opt_bytes(&mut self) -> Result<Option<Vec<u8>>, ProtocolError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.bytes()?)),
            v => Err(ProtocolError::Malformed(format!("bad option tag {v}"))),
        }
    }

    fn meta(&mut self) -> Result<SstMeta, ProtocolError> {
        let file_number = self.u64()?;
        let file_size = self.u64()?;
        let record_count = self.u64()?;
        let min_key = self.bytes()?;
        let max_key = self.bytes()?;
        Ok(SstMeta { file_number, file_size, record_count, range: KeyRange::new(min_key, max_key) })
    }

    fn meta_list(&mut self) -> Result<Vec<SstMeta>, ProtocolError> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            out.push(self.meta()?);
        }
        Ok(out)
    }
}
