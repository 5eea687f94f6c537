//! The device process: an emulated NDP-capable SSD that executes
//! device-side compaction over the shared database directory.
//!
//! The server accepts one session at a time and serves compaction requests
//! sequentially. Input blocks are read directly from local files — those
//! bytes are charged to an internal-bandwidth counter, not the host
//! transfer ledger, since in the modeled system they never cross the host
//! interface. A configurable per-byte delay emulates device compute being
//! slower than the host CPU.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::error::{Error, Result};
use crate::merge::merge_run;
use crate::protocol::{
    error_code, read_message, write_message, DeviceRequest, SemanticMessage, PROTOCOL_VERSION,
};
use crate::sstable::{write_sorted_run, Table};
use crate::types::SstMeta;

/// Baseline rate for the artificial delay model: a slowdown factor of 1.0
/// costs one second per 100MB of input read.
pub const DEVICE_REFERENCE_RATE: f64 = 100_000_000.0;

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    pub db_path: PathBuf,
    pub listen: String,
    /// >= 0; 0 disables the artificial delay.
    pub slowdown_factor: f64,
}

#[derive(Debug, Clone)]
pub struct DeviceResult {
    pub new_files: Vec<SstMeta>,
    pub bytes_written: u64,
    pub device_elapsed: Duration,
}

pub struct DeviceServer {
    listener: TcpListener,
    cfg: DeviceConfig,
}

enum Flow {
    NextSession,
    Stop,
}

impl DeviceServer {
    pub fn bind(cfg: DeviceConfig) -> Result<DeviceServer> {
        if !(cfg.slowdown_factor.is_finite() && cfg.slowdown_factor >= 0.0) {
            return Err(Error::Config("slowdown factor must be finite and >= 0".into()));
        }
        let listener = TcpListener::bind(&cfg.listen)?;
        Ok(DeviceServer { listener, cfg })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serve sessions until a SHUTDOWN message arrives.
    pub fn serve(&self) -> Result<()> {
        loop {
            let (stream, peer) = self.listener.accept()?;
            info!("session from {peer}");
            match self.handle_session(stream) {
                Ok(Flow::Stop) => return Ok(()),
                Ok(Flow::NextSession) => continue,
                Err(e) => {
                    warn!("session ended with error: {e}");
                    continue;
                }
            }
        }
    }

    fn handle_session(&self, mut stream: TcpStream) -> Result<Flow> {
        stream.set_nodelay(true)?;
        let (first, _) = read_message(&mut stream)?;
        match first {
            SemanticMessage::Hello { .. } => {}
            SemanticMessage::Shutdown => return Ok(Flow::Stop),
            other => {
                warn!("expected HELLO, got {other:?}");
                return Ok(Flow::NextSession);
            }
        }
        // Refuse the session with a version-0 HELLO when the shared
        // directory is not usable.
        if std::fs::read_dir(&self.cfg.db_path).is_err() {
            write_message(&mut stream, &SemanticMessage::Hello { version: 0 })?;
            return Ok(Flow::NextSession);
        }
        write_message(&mut stream, &SemanticMessage::Hello { version: PROTOCOL_VERSION })?;

        loop {
            let msg = match read_message(&mut stream) {
                Ok((m, _)) => m,
                Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                    return Ok(Flow::NextSession);
                }
                Err(e) => return Err(e),
            };
            match msg {
                SemanticMessage::CompactRequest(req) => {
                    let id = req.task.compaction_id;
                    let reply = match run_device_compaction(
                        &self.cfg.db_path,
                        self.cfg.slowdown_factor,
                        &req,
                    ) {
                        Ok(res) => SemanticMessage::CompactDone {
                            compaction_id: id,
                            files: res.new_files,
                            bytes_written: res.bytes_written,
                            device_elapsed_us: res.device_elapsed.as_micros() as u64,
                        },
                        Err(e) => {
                            warn!("compaction {id} failed: {e}");
                            let code = match &e {
                                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                                    error_code::MISSING_INPUT
                                }
                                Error::Io(_) => error_code::IO,
                                Error::Corruption(_) => error_code::CORRUPTION,
                                Error::Contract(_) => error_code::CONTRACT,
                                Error::Config(_) => error_code::FILE_BLOCK_EXHAUSTED,
                                _ => error_code::IO,
                            };
                            SemanticMessage::CompactError {
                                compaction_id: id,
                                code,
                                message: e.to_string(),
                            }
                        }
                    };
                    write_message(&mut stream, &reply)?;
                }
                SemanticMessage::Shutdown => return Ok(Flow::Stop),
                other => warn!("ignoring unexpected message {other:?}"),
            }
        }
    }
}

/// Execute the device half of a split compaction and return metadata only.
pub fn run_device_compaction(
    db_path: &Path,
    slowdown_factor: f64,
    req: &DeviceRequest,
) -> Result<DeviceResult> {
    let start = Instant::now();
    let internal_read = Arc::new(AtomicU64::new(0));

    let mut iters = Vec::new();
    for meta in req.task.inputs_k.iter().chain(req.task.inputs_k1.iter()) {
        let table = Arc::new(Table::open_counted(
            &meta.path_in(db_path),
            meta.file_number,
            Some(Arc::clone(&internal_read)),
        )?);
        iters.push(table.iter(req.task.key_filter.clone()));
    }
    let merged = merge_run(iters, req.task.key_filter.clone(), req.drop_tombstones);

    let mut next = req.file_number_start;
    let end = req.file_number_start + req.file_number_count as u64;
    let mut alloc = || {
        if next >= end {
            return Err(Error::Config("pre-allocated file-number block exhausted".into()));
        }
        let n = next;
        next += 1;
        Ok(n)
    };
    let new_files = write_sorted_run(
        merged,
        db_path,
        &mut alloc,
        req.target_file_size,
        req.block_size as usize,
        true,
    )?;
    let bytes_written: u64 = new_files.iter().map(|m| m.file_size).sum();

    let input_bytes = internal_read.load(Ordering::Relaxed);
    if slowdown_factor > 0.0 {
        let delay = slowdown_factor * input_bytes as f64 / DEVICE_REFERENCE_RATE;
        std::thread::sleep(Duration::from_secs_f64(delay));
    }
    info!(
        "compaction {}: read {input_bytes}B internally, wrote {bytes_written}B in {} files",
        req.task.compaction_id,
        new_files.len()
    );

    Ok(DeviceResult { new_files, bytes_written, device_elapsed: start.elapsed() })
}
