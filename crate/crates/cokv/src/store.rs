//! The store: write path, read path, recovery, and the background worker
//! that runs flushes and compactions.
//!
//! Writes take a single logical writer path: WAL append (the commit
//! point), then memtable insert. When the memtable fills it is sealed and
//! handed to the background thread, which flushes it to L0 and then runs
//! compactions until no level is over budget. Readers are never blocked:
//! they probe the memtables under a short lock and then an immutable
//! version snapshot.
//!
//! On-disk layout: `<db>/LOG.wal`, `<db>/MANIFEST`, `<db>/<n>.sst`, plus a
//! transient `LOG.wal.old` between a seal and its flush commit.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use parking_lot::{Condvar, Mutex, RwLock};
use sha2::{Digest, Sha256};

use crate::compaction::{pick_compaction, run_baseline_compaction, should_trigger, CompactionEnv};
use crate::config::{Mode, StoreConfig};
use crate::error::{Error, Result};
use crate::memtable::MemTable;
use crate::merge::merge_run;
use crate::metrics::{CompactionEvent, MetricsLedger};
use crate::offload::run_cokv_compaction;
use crate::session::DeviceSession;
use crate::sstable::{write_sorted_run, TableCache};
use crate::types::{InternalRecord, KeyFilter, RecordKind, SstMeta};
use crate::version::{Version, VersionEdit};
use crate::wal::{self, WalWriter, WAL_NAME, WAL_OLD_NAME};

pub struct Store {
    inner: Arc<StoreInner>,
    bg: Mutex<Option<std::thread::JoinHandle<()>>>,
}

struct StoreInner {
    cfg: StoreConfig,
    dir: PathBuf,
    ledger: Arc<MetricsLedger>,
    cache: TableCache,
    write: Mutex<WriteState>,
    imm_freed: Condvar,
    bg_state: Mutex<BgState>,
    bg_cv: Condvar,
    versions: Mutex<VersionState>,
    current: RwLock<Arc<Version>>,
    next_seq: AtomicU64,
    /// Highest sequence number durable in SSTables; WAL replay skips
    /// records at or below this. Only flushes may advance it.
    flushed_seq: AtomicU64,
    next_file: AtomicU64,
    next_compaction_id: AtomicU64,
    device: Mutex<Option<Arc<DeviceSession>>>,
    degraded: AtomicBool,
    events: Mutex<Vec<CompactionEvent>>,
}

struct WriteState {
    mem: MemTable,
    imm: Option<Arc<MemTable>>,
    wal: WalWriter,
}

#[derive(Default)]
struct BgState {
    pending: bool,
    busy: bool,
    shutdown: bool,
    error: Option<String>,
}

struct VersionState {
    manifest: crate::manifest::Manifest,
    cursors: Vec<Option<Vec<u8>>>,
}

impl Store {
    /// Open (or create) a store at `dir`: replay the manifest, collect
    /// orphan files, replay the WAL into an L0 table, and connect to the
    /// device when running in cokv mode.
    pub fn open(dir: impl Into<PathBuf>, cfg: StoreConfig) -> Result<Store> {
        cfg.validate()?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;

        let (mut manifest, recovered) = crate::manifest::Manifest::open(&dir, cfg.max_levels)?;
        manifest.set_sync(cfg.sync_files);
        let mut version = recovered.version;
        if version.levels.len() < cfg.max_levels {
            version.levels.resize(cfg.max_levels, Vec::new());
        }

        // File numbers present on disk, live or orphaned, before any GC.
        let mut disk_files: Vec<u64> = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".sst") {
                if let Ok(n) = stem.parse::<u64>() {
                    disk_files.push(n);
                }
            }
        }
        let live: std::collections::HashSet<u64> =
            version.live_files().map(|m| m.file_number).collect();
        let max_file =
            disk_files.iter().copied().max().unwrap_or(0).max(live.iter().copied().max().unwrap_or(0));

        // Garbage-collect orphans: device leftovers, uncommitted outputs.
        for n in &disk_files {
            if !live.contains(n) {
                let _ = std::fs::remove_file(dir.join(SstMeta::file_name(*n)));
                info!("removed orphan file {n}");
            }
        }

        // Replay both WAL generations, skipping anything already flushed.
        let mut recovered_mem = MemTable::new();
        let mut max_seq = recovered.next_seq;
        for path in [dir.join(WAL_OLD_NAME), dir.join(WAL_NAME)] {
            for rec in wal::replay(&path)? {
                max_seq = max_seq.max(rec.seq);
                if rec.seq > recovered.next_seq {
                    recovered_mem.insert(rec);
                }
            }
        }

        let ledger = Arc::new(MetricsLedger::default());
        let next_file = AtomicU64::new(max_file + 1);

        // Recovered writes go straight to L0 so the WAL can be reset.
        if !recovered_mem.is_empty() {
            let mut alloc = || Ok(next_file.fetch_add(1, Ordering::SeqCst));
            let outputs = write_sorted_run(
                recovered_mem.records().map(Ok),
                &dir,
                &mut alloc,
                cfg.sstable_target_size,
                cfg.block_size,
                cfg.sync_files,
            )?;
            ledger.add_flush_bytes(outputs.iter().map(|m| m.file_size).sum());
            let edit = VersionEdit {
                deleted: vec![],
                added: outputs.into_iter().map(|m| (0, m)).collect(),
                next_seq: max_seq,
            };
            version = version.apply(&edit)?;
            ledger.add_manifest_bytes(manifest.append_edit(&edit)?);
        }

        // Full snapshot at open, then fresh WAL.
        ledger.add_manifest_bytes(manifest.append_snapshot(&version, max_seq)?);
        let wal = WalWriter::create(&dir)?;
        let _ = std::fs::remove_file(dir.join(WAL_OLD_NAME));

        let device = match (cfg.mode, &cfg.device_endpoint) {
            (Mode::Cokv, Some(endpoint)) => Some(Arc::new(DeviceSession::connect_with_retry(
                endpoint,
                Arc::clone(&ledger),
                cfg.device_timeout,
                Duration::from_secs(5),
            )?)),
            _ => None,
        };

        let max_levels = cfg.max_levels;
        let inner = Arc::new(StoreInner {
            cfg,
            cache: TableCache::new(dir.clone(), 128),
            dir,
            ledger,
            write: Mutex::new(WriteState { mem: MemTable::new(), imm: None, wal }),
            imm_freed: Condvar::new(),
            bg_state: Mutex::new(BgState::default()),
            bg_cv: Condvar::new(),
            versions: Mutex::new(VersionState { manifest, cursors: vec![None; max_levels] }),
            current: RwLock::new(Arc::new(version)),
            next_seq: AtomicU64::new(max_seq),
            flushed_seq: AtomicU64::new(max_seq),
            next_file,
            next_compaction_id: AtomicU64::new(1),
            device: Mutex::new(device),
            degraded: AtomicBool::new(false),
            events: Mutex::new(Vec::new()),
        });

        let bg = {
            let inner = Arc::clone(&inner);
            std::thread::Builder::new()
                .name("cokv-background".into())
                .spawn(move || inner.background_loop())
                .expect("spawn background thread")
        };

        let store = Store { inner, bg: Mutex::new(Some(bg)) };
        // Recovery may have left levels over budget.
        store.inner.kick_background();
        Ok(store)
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<()> {
        self.write_record(key, RecordKind::Put, value)
    }

    pub fn delete(&self, key: &[u8]) -> Result<()> {
        self.write_record(key, RecordKind::Delete, &[])
    }

    fn write_record(&self, key: &[u8], kind: RecordKind, value: &[u8]) -> Result<()> {
        if key.is_empty() {
            return Err(Error::contract("key must be non-empty"));
        }
        let inner = &self.inner;
        let mut w = inner.write.lock();
        if let Some(msg) = inner.bg_state.lock().error.clone() {
            return Err(Error::corruption(format!("background worker failed: {msg}")));
        }
        let seq = inner.next_seq.fetch_add(1, Ordering::SeqCst) + 1;
        let rec = InternalRecord { user_key: key.to_vec(), seq, kind, value: value.to_vec() };
        let n = w.wal.append(&rec)?;
        inner.ledger.add_wal_bytes(n);
        let user = match kind {
            RecordKind::Put => key.len() + value.len(),
            RecordKind::Delete => key.len(),
        };
        inner.ledger.add_user_bytes(user as u64);
        w.mem.insert(rec);
        if w.mem.approx_bytes() >= inner.cfg.memtable_capacity {
            inner.seal(&mut w)?;
        }
        Ok(())
    }

    /// Newest live value for `key`, honoring tombstones.
    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let inner = &self.inner;
        {
            let w = inner.write.lock();
            if let Some((_, kind, v)) = w.mem.get(key) {
                return Ok(match kind {
                    RecordKind::Put => Some(v.to_vec()),
                    RecordKind::Delete => None,
                });
            }
            if let Some(imm) = &w.imm {
                if let Some((_, kind, v)) = imm.get(key) {
                    return Ok(match kind {
                        RecordKind::Put => Some(v.to_vec()),
                        RecordKind::Delete => None,
                    });
                }
            }
        }

        // A compaction can delete files between taking the snapshot and
        // opening a table; retry with a fresh snapshot when that races.
        'retry: for _ in 0..4 {
            let version = inner.current.read().clone();
            // L0 newest to oldest.
            for meta in version.levels[0].iter().rev() {
                if !meta.range.contains(key) {
                    continue;
                }
                match inner.probe_table(meta, key) {
                    Ok(Some(rec)) => return Ok(decode_record(rec)),
                    Ok(None) => {}
                    Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                        continue 'retry;
                    }
                    Err(e) => return Err(e),
                }
            }
            for level in version.levels.iter().skip(1) {
                let idx = level.partition_point(|m| m.range.max_key.as_slice() < key);
                if idx >= level.len() || !level[idx].range.contains(key) {
                    continue;
                }
                match inner.probe_table(&level[idx], key) {
                    Ok(Some(rec)) => return Ok(decode_record(rec)),
                    Ok(None) => {}
                    Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                        continue 'retry;
                    }
                    Err(e) => return Err(e),
                }
            }
            return Ok(None);
        }
        Err(Error::corruption("live file vanished during repeated probes"))
    }

    /// Full user-visible scan: newest version per key, tombstones elided.
    pub fn scan(&self) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let inner = &self.inner;
        type Stream = Box<dyn Iterator<Item = Result<InternalRecord>>>;
        let mut streams: Vec<Stream> = Vec::new();
        {
            let w = inner.write.lock();
            let mem: Vec<InternalRecord> = w.mem.records().collect();
            streams.push(Box::new(mem.into_iter().map(Ok)));
            if let Some(imm) = &w.imm {
                let imm: Vec<InternalRecord> = imm.records().collect();
                streams.push(Box::new(imm.into_iter().map(Ok)));
            }
        }
        let version = inner.current.read().clone();
        for meta in version.levels.iter().flatten() {
            let table = inner.cache.get(meta)?;
            streams.push(Box::new(table.iter(KeyFilter::all())));
        }
        let mut out = Vec::new();
        for rec in merge_run(streams, KeyFilter::all(), true) {
            let rec = rec?;
            out.push((rec.user_key, rec.value));
        }
        Ok(out)
    }

    /// SHA-256 over the full scan, for cheap equality comparisons.
    pub fn scan_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.scan()? {
            h.update((k.len() as u64).to_le_bytes());
            h.update(&k);
            h.update((v.len() as u64).to_le_bytes());
            h.update(&v);
        }
        Ok(hex_string(&h.finalize()))
    }

    /// Seal the current memtable (even if small) and wait for the flush.
    pub fn flush(&self) -> Result<()> {
        {
            let mut w = self.inner.write.lock();
            if w.mem.is_empty() && w.imm.is_none() {
                return Ok(());
            }
            if !w.mem.is_empty() {
                self.inner.seal(&mut w)?;
            }
        }
        self.wait_idle();
        Ok(())
    }

    /// Block until no flush or compaction work remains.
    pub fn wait_idle(&self) {
        let inner = &self.inner;
        loop {
            let imm_pending = inner.write.lock().imm.is_some();
            let mut bg = inner.bg_state.lock();
            if !imm_pending && !bg.pending && !bg.busy {
                return;
            }
            inner.bg_cv.wait_for(&mut bg, Duration::from_millis(20));
        }
    }

    pub fn ledger(&self) -> &Arc<MetricsLedger> {
        &self.inner.ledger
    }

    pub fn compaction_events(&self) -> Vec<CompactionEvent> {
        self.inner.events.lock().clone()
    }

    /// True when a cokv store has lost its device and fallen back to
    /// baseline compaction.
    pub fn is_degraded(&self) -> bool {
        self.inner.degraded.load(Ordering::SeqCst)
    }

    pub fn current_version(&self) -> Arc<Version> {
        self.inner.current.read().clone()
    }

    pub fn dir(&self) -> &Path {
        &self.inner.dir
    }

    /// Ask the device process to exit; used with auto-spawned devices.
    pub fn shutdown_device(&self) {
        if let Some(session) = self.inner.device.lock().as_ref() {
            session.send_shutdown();
        }
    }

    pub fn close(self) -> Result<()> {
        self.wait_idle();
        {
            let mut bg = self.inner.bg_state.lock();
            bg.shutdown = true;
            self.inner.bg_cv.notify_all();
        }
        if let Some(h) = self.bg.lock().take() {
            let _ = h.join();
        }
        let err = self.inner.bg_state.lock().error.clone();
        match err {
            Some(msg) => Err(Error::corruption(format!("background worker failed: {msg}"))),
            None => Ok(()),
        }
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        {
            let mut bg = self.inner.bg_state.lock();
            bg.shutdown = true;
            self.inner.bg_cv.notify_all();
        }
        if let Some(h) = self.bg.lock().take() {
            let _ = h.join();
        }
    }
}

fn decode_record(rec: InternalRecord) -> Option<Vec<u8>> {
    match rec.kind {
        RecordKind::Put => Some(rec.value),
        RecordKind::Delete => None,
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl StoreInner {
    /// Seal the active memtable: rotate the WAL, move the memtable into
    /// the immutable slot, and wake the background worker. Blocks while a
    /// previous flush is still in flight.
    fn seal(&self, w: &mut parking_lot::MutexGuard<'_, WriteState>) -> Result<()> {
        while w.imm.is_some() {
            if let Some(msg) = self.bg_state.lock().error.clone() {
                return Err(Error::corruption(format!("background worker failed: {msg}")));
            }
            self.imm_freed.wait(w);
        }
        w.wal.rotate()?;
        let sealed = std::mem::take(&mut w.mem);
        w.imm = Some(Arc::new(sealed));
        self.kick_background();
        Ok(())
    }

    fn kick_background(&self) {
        let mut bg = self.bg_state.lock();
        bg.pending = true;
        self.bg_cv.notify_all();
    }

    fn background_loop(&self) {
        loop {
            {
                let mut bg = self.bg_state.lock();
                while !bg.pending && !bg.shutdown {
                    self.bg_cv.wait(&mut bg);
                }
                if bg.shutdown {
                    return;
                }
                bg.pending = false;
                bg.busy = true;
            }

            if let Err(e) = self.background_pass() {
                warn!("background worker error: {e}");
                let mut bg = self.bg_state.lock();
                bg.error = Some(e.to_string());
                bg.busy = false;
                self.bg_cv.notify_all();
                self.imm_freed.notify_all();
                return;
            }

            let mut bg = self.bg_state.lock();
            bg.busy = false;
            self.bg_cv.notify_all();
        }
    }

    fn background_pass(&self) -> Result<()> {
        let imm = self.write.lock().imm.clone();
        if let Some(imm) = imm {
            self.flush_imm(&imm)?;
            let mut w = self.write.lock();
            w.imm = None;
            let _ = std::fs::remove_file(self.dir.join(WAL_OLD_NAME));
            self.imm_freed.notify_all();
        }
        loop {
            let version = self.current.read().clone();
            match should_trigger(&version, &self.cfg) {
                Some(k) => self.compact_level(&version, k)?,
                None => break,
            }
        }
        Ok(())
    }

    fn flush_imm(&self, imm: &MemTable) -> Result<()> {
        let max_seq = imm.max_seq();
        let edit = if imm.is_empty() {
            VersionEdit { deleted: vec![], added: vec![], next_seq: max_seq }
        } else {
            let mut alloc = || Ok(self.next_file.fetch_add(1, Ordering::SeqCst));
            let outputs = write_sorted_run(
                imm.records().map(Ok),
                &self.dir,
                &mut alloc,
                self.cfg.sstable_target_size,
                self.cfg.block_size,
                self.cfg.sync_files,
            )?;
            self.ledger.add_flush_bytes(outputs.iter().map(|m| m.file_size).sum());
            VersionEdit {
                deleted: vec![],
                added: outputs.into_iter().map(|m| (0, m)).collect(),
                next_seq: max_seq,
            }
        };
        self.install_edit(edit)?;
        self.flushed_seq.fetch_max(max_seq, Ordering::SeqCst);
        Ok(())
    }

    fn compact_level(&self, version: &Arc<Version>, k: usize) -> Result<()> {
        let task = {
            let mut vs = self.versions.lock();
            pick_compaction(version, k, &mut vs.cursors[k])
        };
        // Tombstones can be dropped only when nothing deeper can hold the key.
        let drop_tombstones =
            version.levels[task.target_level + 1..].iter().all(|l| l.is_empty());
        let env = CompactionEnv {
            dir: &self.dir,
            target_file_size: self.cfg.sstable_target_size,
            block_size: self.cfg.block_size,
            sync: self.cfg.sync_files,
            drop_tombstones,
            next_seq: self.flushed_seq.load(Ordering::SeqCst),
            next_file: &self.next_file,
            ledger: &self.ledger,
            cache: &self.cache,
        };

        let session = self.device.lock().clone();
        let (edit, event) = match session {
            Some(session) if !self.degraded.load(Ordering::SeqCst) => {
                let id = self.next_compaction_id.fetch_add(1, Ordering::SeqCst);
                let result = run_cokv_compaction(
                    &env,
                    &task,
                    &session,
                    id,
                    self.cfg.file_number_block,
                );
                if session.is_failed() {
                    warn!("device session lost; store degrades to baseline compaction");
                    self.degraded.store(true, Ordering::SeqCst);
                    *self.device.lock() = None;
                }
                result?
            }
            _ => run_baseline_compaction(&env, &task)?,
        };

        self.install_edit(edit)?;
        self.events.lock().push(event);
        Ok(())
    }

    /// Validate, log to the manifest, install atomically, then unlink the
    /// replaced files.
    fn install_edit(&self, edit: VersionEdit) -> Result<()> {
        let mut vs = self.versions.lock();
        let current = self.current.read().clone();
        let next = current.apply(&edit)?;
        self.ledger.add_manifest_bytes(vs.manifest.append_edit(&edit)?);
        *self.current.write() = Arc::new(next);
        drop(vs);

        for (level, fno) in &edit.deleted {
            // Trivial moves re-add the same file at the next level.
            if edit.added.iter().any(|(_, m)| m.file_number == *fno) {
                continue;
            }
            self.cache.evict(*fno);
            let _ = std::fs::remove_file(self.dir.join(SstMeta::file_name(*fno)));
            let _ = level;
        }
        Ok(())
    }

    fn probe_table(&self, meta: &SstMeta, key: &[u8]) -> Result<Option<InternalRecord>> {
        let table = self.cache.get(meta)?;
        table.get(key)
    }
}
