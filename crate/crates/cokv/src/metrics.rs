use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Byte and latency accounting for one store lifetime.
///
/// `host_written_bytes` is everything the host writes to disk: WAL appends,
/// manifest appends, memtable flushes, and host-side compaction output.
/// Device compaction output is tracked separately and excluded from the
/// host-level write amplification ratio.
#[derive(Default)]
pub struct MetricsLedger {
    user_bytes: AtomicU64,
    wal_bytes: AtomicU64,
    manifest_bytes: AtomicU64,
    flush_bytes: AtomicU64,
    host_compaction_bytes: AtomicU64,
    device_written_bytes: AtomicU64,
    /// Semantic protocol bytes, both directions.
    transfer_bytes: AtomicU64,
    op_count: AtomicU64,
    update_latencies_us: Mutex<Vec<u64>>,
    read_latencies_us: Mutex<Vec<u64>>,
}

impl MetricsLedger {
    pub fn add_user_bytes(&self, n: u64) {
        self.user_bytes.fetch_add(n, Ordering::Relaxed);
        self.op_count.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_wal_bytes(&self, n: u64) {
        self.wal_bytes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_manifest_bytes(&self, n: u64) {
        self.manifest_bytes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_flush_bytes(&self, n: u64) {
        self.flush_bytes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_host_compaction_bytes(&self, n: u64) {
        self.host_compaction_bytes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_device_written_bytes(&self, n: u64) {
        self.device_written_bytes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_transfer_bytes(&self, n: u64) {
        self.transfer_bytes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn record_update_latency(&self, us: u64) {
        self.update_latencies_us.lock().push(us);
    }

    pub fn record_read_latency(&self, us: u64) {
        self.read_latencies_us.lock().push(us);
    }

    pub fn user_bytes(&self) -> u64 {
        self.user_bytes.load(Ordering::Relaxed)
    }

    pub fn host_written_bytes(&self) -> u64 {
        self.wal_bytes.load(Ordering::Relaxed)
            + self.manifest_bytes.load(Ordering::Relaxed)
            + self.flush_bytes.load(Ordering::Relaxed)
            + self.host_compaction_bytes.load(Ordering::Relaxed)
    }

    pub fn device_written_bytes(&self) -> u64 {
        self.device_written_bytes.load(Ordering::Relaxed)
    }

    pub fn transfer_bytes(&self) -> u64 {
        self.transfer_bytes.load(Ordering::Relaxed)
    }

    pub fn op_count(&self) -> u64 {
        self.op_count.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            user_bytes: self.user_bytes.load(Ordering::Relaxed),
            wal_bytes: self.wal_bytes.load(Ordering::Relaxed),
            manifest_bytes: self.manifest_bytes.load(Ordering::Relaxed),
            flush_bytes: self.flush_bytes.load(Ordering::Relaxed),
            host_compaction_bytes: self.host_compaction_bytes.load(Ordering::Relaxed),
            host_written_bytes: self.host_written_bytes(),
            device_written_bytes: self.device_written_bytes.load(Ordering::Relaxed),
            transfer_bytes: self.transfer_bytes.load(Ordering::Relaxed),
            op_count: self.op_count.load(Ordering::Relaxed),
        }
    }

    /// Sorted copies of the latency reservoirs (updates, reads), in microseconds.
    pub fn latencies(&self) -> (Vec<u64>, Vec<u64>) {
        let mut u = self.update_latencies_us.lock().clone();
        let mut r = self.read_latencies_us.lock().clone();
        u.sort_unstable();
        r.sort_unstable();
        (u, r)
    }
}

/// Point-in-time copy of the byte counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub user_bytes: u64,
    pub wal_bytes: u64,
    pub manifest_bytes: u64,
    pub flush_bytes: u64,
    pub host_compaction_bytes: u64,
    pub host_written_bytes: u64,
    pub device_written_bytes: u64,
    pub transfer_bytes: u64,
    pub op_count: u64,
}

impl LedgerSnapshot {
    /// host_written / user, or None when nothing was written by the user.
    pub fn write_amplification(&self) -> Option<f64> {
        if self.user_bytes == 0 {
            None
        } else {
            Some(self.host_written_bytes as f64 / self.user_bytes as f64)
        }
    }
}

/// One compaction, as recorded in the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactionEvent {
    pub level: usize,
    pub inputs_k: usize,
    pub inputs_k1: usize,
    pub trivial_move: bool,
    pub offloaded: bool,
    pub host_output_bytes: u64,
    pub device_output_bytes: u64,
}
