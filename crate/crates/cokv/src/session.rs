//! Host side of the device connection: one writer, one reader thread, at
//! most one outstanding compaction request. Replies are matched to the
//! outstanding request by compaction id; anything stale is logged and
//! dropped. A transport failure resolves any pending request as broken and
//! marks the whole session failed, after which the store degrades to
//! baseline compaction.

use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{info, warn};
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::metrics::MetricsLedger;
use crate::protocol::{
    read_message, write_message, DeviceRequest, SemanticMessage, PROTOCOL_VERSION,
};
use crate::types::SstMeta;

#[derive(Debug)]
pub enum DeviceReply {
    Done { files: Vec<SstMeta>, bytes_written: u64, device_elapsed_us: u64 },
    Error { code: u32, message: String },
    TimedOut,
    Broken,
}

struct Pending {
    id: u64,
    tx: mpsc::SyncSender<DeviceReply>,
}

pub struct DeviceSession {
    writer: Mutex<TcpStream>,
    pending: Arc<Mutex<Option<Pending>>>,
    failed: Arc<AtomicBool>,
    ledger: Arc<MetricsLedger>,
    timeout: Duration,
    reader: Option<JoinHandle<()>>,
}

impl DeviceSession {
    /// Connect and perform the mutual HELLO handshake.
    pub fn connect(
        endpoint: &str,
        ledger: Arc<MetricsLedger>,
        timeout: Duration,
    ) -> Result<DeviceSession> {
        let mut stream = TcpStream::connect(endpoint)?;
        stream.set_nodelay(true)?;

        let sent = write_message(&mut stream, &SemanticMessage::Hello { version: PROTOCOL_VERSION })?;
        ledger.add_transfer_bytes(sent);

        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        let (reply, nread) = read_message(&mut stream)?;
        stream.set_read_timeout(None)?;
        ledger.add_transfer_bytes(nread);
        match reply {
            SemanticMessage::Hello { version } if version == PROTOCOL_VERSION => {}
            SemanticMessage::Hello { version } => {
                return Err(Error::Device {
                    code: 0,
                    message: format!("device refused session (hello version {version})"),
                });
            }
            other => {
                return Err(Error::Device {
                    code: 0,
                    message: format!("unexpected handshake reply {other:?}"),
                })
            }
        }

        let pending: Arc<Mutex<Option<Pending>>> = Arc::new(Mutex::new(None));
        let failed = Arc::new(AtomicBool::new(false));
        let mut read_half = stream.try_clone()?;
        let reader = {
            let pending = Arc::clone(&pending);
            let failed = Arc::clone(&failed);
            let ledger = Arc::clone(&ledger);
            std::thread::Builder::new()
                .name("cokv-session-reader".into())
                .spawn(move || loop {
                    match read_message(&mut read_half) {
                        Ok((msg, nread)) => {
                            ledger.add_transfer_bytes(nread);
                            dispatch_reply(&pending, msg);
                        }
                        Err(e) => {
                            if !failed.swap(true, Ordering::SeqCst) {
                                info!("device session reader stopped: {e}");
                            }
                            if let Some(p) = pending.lock().take() {
                                let _ = p.tx.try_send(DeviceReply::Broken);
                            }
                            return;
                        }
                    }
                })
                .expect("spawn session reader")
        };

        Ok(DeviceSession {
            writer: Mutex::new(stream),
            pending,
            failed,
            ledger,
            timeout,
            reader: Some(reader),
        })
    }

    /// Connect, retrying briefly while a freshly spawned device comes up.
    pub fn connect_with_retry(
        endpoint: &str,
        ledger: Arc<MetricsLedger>,
        timeout: Duration,
        retry_for: Duration,
    ) -> Result<DeviceSession> {
        let deadline = Instant::now() + retry_for;
        loop {
            match Self::connect(endpoint, Arc::clone(&ledger), timeout) {
                Ok(s) => return Ok(s),
                Err(e) => {
                    if Instant::now() >= deadline {
                        return Err(e);
                    }
                    std::thread::sleep(Duration::from_millis(50));
                }
            }
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failed.load(Ordering::SeqCst)
    }

    /// Send a COMPACT_REQUEST; the returned handle resolves when the
    /// matching COMPACT_DONE / COMPACT_ERROR arrives, or on timeout.
    pub fn request_device_compaction(&self, req: DeviceRequest) -> Result<ReplyHandle> {
        if self.is_failed() {
            return Err(Error::SessionLost);
        }
        let id = req.task.compaction_id;
        let (tx, rx) = mpsc::sync_channel(1);
        {
            let mut p = self.pending.lock();
            if p.is_some() {
                return Err(Error::contract("a device compaction is already outstanding"));
            }
            *p = Some(Pending { id, tx });
        }
        let sent = {
            let mut w = self.writer.lock();
            write_message(&mut *w, &SemanticMessage::CompactRequest(req))
        };
        match sent {
            Ok(n) => {
                self.ledger.add_transfer_bytes(n);
                Ok(ReplyHandle {
                    rx,
                    id,
                    pending: Arc::clone(&self.pending),
                    timeout: self.timeout,
                })
            }
            Err(e) => {
                self.pending.lock().take();
                self.failed.store(true, Ordering::SeqCst);
                warn!("device request write failed: {e}");
                Err(Error::SessionLost)
            }
        }
    }

    /// Best-effort SHUTDOWN; used when the store owns the device process.
    pub fn send_shutdown(&self) {
        let mut w = self.writer.lock();
        if let Ok(n) = write_message(&mut *w, &SemanticMessage::Shutdown) {
            self.ledger.add_transfer_bytes(n);
        }
    }
}

impl Drop for DeviceSession {
    fn drop(&mut self) {
        let _ = self.writer.lock().shutdown(std::net::Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

fn dispatch_reply(pending: &Mutex<Option<Pending>>, msg: SemanticMessage) {
    let id = match &msg {
        SemanticMessage::CompactDone { compaction_id, .. } => *compaction_id,
        SemanticMessage::CompactError { compaction_id, .. } => *compaction_id,
        other => {
            warn!("ignoring unexpected device message {other:?}");
            return;
        }
    };
    let mut guard = pending.lock();
    match guard.as_ref() {
        Some(p) if p.id == id => {
            let p = guard.take().unwrap();
            let reply = match msg {
                SemanticMessage::CompactDone { files, bytes_written, device_elapsed_us, .. } => {
                    DeviceReply::Done { files, bytes_written, device_elapsed_us }
                }
                SemanticMessage::CompactError { code, message, .. } => {
                    DeviceReply::Error { code, message }
                }
                _ => unreachable!(),
            };
            let _ = p.tx.try_send(reply);
        }
        _ => {
            // Stale or duplicate completion: drop it, the request it
            // belonged to was already resolved.
            warn!("discarding stale device reply for compaction {id}");
        }
    }
}

pub struct ReplyHandle {
    rx: mpsc::Receiver<DeviceReply>,
    id: u64,
    pending: Arc<Mutex<Option<Pending>>>,
    timeout: Duration,
}

impl ReplyHandle {
    /// Block until the reply arrives or the configured timeout passes.
    pub fn wait(self) -> DeviceReply {
        match self.rx.recv_timeout(self.timeout) {
            Ok(reply) => reply,
            Err(_) => {
                // Deregister so a late reply is treated as stale.
                let mut guard = self.pending.lock();
                if guard.as_ref().map(|p| p.id) == Some(self.id) {
                    guard.take();
                    return DeviceReply::TimedOut;
                }
                drop(guard);
                // The reader dispatched concurrently with the timeout.
                self.rx.try_recv().unwrap_or(DeviceReply::TimedOut)
            }
        }
    }
}
