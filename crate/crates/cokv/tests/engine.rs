//! End-to-end engine tests: collaborative compaction against a live
//! device, session failure handling, crash recovery, and ledger
//! conservation.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use cokv::bench::{execute_ops, gen_verify_ops, Op};
use cokv::device::{DeviceConfig, DeviceServer};
use cokv::metrics::MetricsLedger;
use cokv::protocol::{read_message, write_message, SemanticMessage, PROTOCOL_VERSION};
use cokv::session::{DeviceReply, DeviceSession};
use cokv::{Mode, Store, StoreConfig};

/// In-process device serving a database directory on a random port.
struct TestDevice {
    endpoint: String,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl TestDevice {
    fn start(db: &Path, slowdown: f64) -> TestDevice {
        let server = DeviceServer::bind(DeviceConfig {
            db_path: db.to_path_buf(),
            listen: "127.0.0.1:0".into(),
            slowdown_factor: slowdown,
        })
        .expect("bind device");
        let endpoint = server.local_addr().unwrap().to_string();
        let thread = std::thread::spawn(move || {
            let _ = server.serve();
        });
        TestDevice { endpoint, thread: Some(thread) }
    }
}

impl Drop for TestDevice {
    fn drop(&mut self) {
        // A bare SHUTDOWN frame stops the accept loop.
        if let Ok(mut s) = std::net::TcpStream::connect(&self.endpoint) {
            let _ = write_message(&mut s, &SemanticMessage::Shutdown);
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn small_cfg(mode: Mode, endpoint: Option<String>) -> StoreConfig {
    StoreConfig {
        mode,
        device_endpoint: endpoint,
        memtable_capacity: 32 << 10,
        sstable_target_size: 16 << 10,
        block_size: 2 << 10,
        l1_budget: 64 << 10,
        growth_factor: 4,
        sync_files: false,
        ..StoreConfig::default()
    }
}

fn run_ops_to_scan(dir: &Path, cfg: StoreConfig, ops: &[Op]) -> (Vec<(Vec<u8>, Vec<u8>)>, String) {
    let store = Store::open(dir, cfg).expect("open store");
    execute_ops(&store, ops.iter().cloned()).expect("ops apply");
    store.wait_idle();
    let scan = store.scan().expect("scan");
    let digest = store.scan_digest().expect("digest");
    store.shutdown_device();
    store.close().expect("close");
    (scan, digest)
}

fn reference_map(ops: &[Op]) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut m: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    for op in ops {
        match op {
            Op::Put(k, v) => {
                m.insert(k.clone(), v.clone());
            }
            Op::Delete(k) => {
                m.remove(k);
            }
            Op::Get(_) => {}
        }
    }
    m.into_iter().collect()
}

#[test]
fn cokv_mode_matches_baseline_and_reference() {
    for seed in [11u64, 12, 13] {
        let ops = gen_verify_ops(seed, 8_000);
        let expected = reference_map(&ops);

        let base_dir = tempfile::tempdir().unwrap();
        let (base_scan, base_digest) =
            run_ops_to_scan(base_dir.path(), small_cfg(Mode::Baseline, None), &ops);
        assert_eq!(base_scan, expected, "baseline vs reference, seed {seed}");

        let cokv_dir = tempfile::tempdir().unwrap();
        let device = TestDevice::start(cokv_dir.path(), 0.0);
        let (cokv_scan, cokv_digest) = run_ops_to_scan(
            cokv_dir.path(),
            small_cfg(Mode::Cokv, Some(device.endpoint.clone())),
            &ops,
        );
        assert_eq!(cokv_scan, expected, "cokv vs reference, seed {seed}");
        assert_eq!(base_digest, cokv_digest);
    }
}

#[test]
fn cokv_actually_offloads_and_reduces_host_bytes() {
    let ops = gen_verify_ops(77, 20_000);

    let base_dir = tempfile::tempdir().unwrap();
    let base_store = Store::open(base_dir.path(), small_cfg(Mode::Baseline, None)).unwrap();
    execute_ops(&base_store, ops.iter().cloned()).unwrap();
    base_store.wait_idle();
    let base_snap = base_store.ledger().snapshot();
    base_store.close().unwrap();

    let cokv_dir = tempfile::tempdir().unwrap();
    let device = TestDevice::start(cokv_dir.path(), 0.0);
    let cokv_store = Store::open(
        cokv_dir.path(),
        small_cfg(Mode::Cokv, Some(device.endpoint.clone())),
    )
    .unwrap();
    execute_ops(&cokv_store, ops.iter().cloned()).unwrap();
    cokv_store.wait_idle();
    let cokv_snap = cokv_store.ledger().snapshot();
    let events = cokv_store.compaction_events();
    assert!(!cokv_store.is_degraded());
    cokv_store.shutdown_device();
    cokv_store.close().unwrap();

    assert!(
        events.iter().any(|e| e.offloaded),
        "expected at least one offloaded compaction, got {events:?}"
    );
    assert!(cokv_snap.device_written_bytes > 0);
    assert!(cokv_snap.transfer_bytes > 0);
    assert!(
        cokv_snap.host_written_bytes < base_snap.host_written_bytes,
        "cokv host bytes {} should be below baseline {}",
        cokv_snap.host_written_bytes,
        base_snap.host_written_bytes
    );
    // Identical op stream: user bytes match exactly.
    assert_eq!(cokv_snap.user_bytes, base_snap.user_bytes);
}

/// host + device written bytes must equal every file ever created plus
/// WAL and manifest bytes; cross-checked against the manifest record log
/// and the live files on disk.
#[test]
fn ledger_conservation_against_manifest() {
    let ops = gen_verify_ops(5, 15_000);
    let dir = tempfile::tempdir().unwrap();
    let device = TestDevice::start(dir.path(), 0.0);
    let store = Store::open(dir.path(), small_cfg(Mode::Cokv, Some(device.endpoint.clone()))).unwrap();
    execute_ops(&store, ops.iter().cloned()).unwrap();
    store.wait_idle();
    let snap = store.ledger().snapshot();

    // Live file sizes must match their metadata.
    let version = store.current_version();
    for meta in version.live_files() {
        let on_disk = std::fs::metadata(meta.path_in(dir.path())).unwrap().len();
        assert_eq!(on_disk, meta.file_size, "file {}", meta.file_number);
    }
    store.shutdown_device();
    store.close().unwrap();

    // Sum every added file over the manifest history (files created),
    // ignoring re-adds of the same file number (trivial moves).
    let (_, recovered) = cokv::manifest::Manifest::open(dir.path(), 7).unwrap();
    let _ = recovered;
    let data = std::fs::read(dir.path().join("MANIFEST")).unwrap();
    let created = sum_created_file_bytes(&data);
    assert_eq!(
        snap.flush_bytes + snap.host_compaction_bytes + snap.device_written_bytes,
        created,
        "file bytes ledger vs manifest history"
    );
    assert_eq!(
        snap.host_written_bytes + snap.device_written_bytes,
        snap.wal_bytes + snap.manifest_bytes + created,
    );
}

/// Walk the manifest record log and total the size of each first-time
/// file addition. Mirrors the on-disk format documented in the manifest
/// module; kept independent of the manifest reader on purpose.
fn sum_created_file_bytes(data: &[u8]) -> u64 {
    let mut off = 0usize;
    let mut seen = std::collections::HashSet::new();
    let mut total = 0u64;
    while data.len() - off >= 8 {
        let len = u32::from_le_bytes(data[off + 4..off + 8].try_into().unwrap()) as usize;
        let payload = &data[off + 8..off + 8 + len];
        let tag = payload[0];
        let mut p = 1 + 8; // tag + next_seq
        if tag == 2 {
            let ndel = u32::from_le_bytes(payload[p..p + 4].try_into().unwrap()) as usize;
            p += 4 + ndel * 12;
            let nadd = u32::from_le_bytes(payload[p..p + 4].try_into().unwrap()) as usize;
            p += 4;
            for _ in 0..nadd {
                p += 4; // level
                let fno = u64::from_le_bytes(payload[p..p + 8].try_into().unwrap());
                let size = u64::from_le_bytes(payload[p + 8..p + 16].try_into().unwrap());
                p += 24; // fno + size + record_count
                let k1 = u16::from_le_bytes(payload[p..p + 2].try_into().unwrap()) as usize;
                p += 2 + k1;
                let k2 = u16::from_le_bytes(payload[p..p + 2].try_into().unwrap()) as usize;
                p += 2 + k2;
                if seen.insert(fno) {
                    total += size;
                }
            }
        } else if tag == 1 {
            // snapshot: files already counted when first added
        }
        off += 8 + len;
    }
    total
}

#[test]
fn fillseq_produces_only_trivial_moves() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), small_cfg(Mode::Baseline, None)).unwrap();
    for i in 0..20_000u64 {
        store.put(format!("{i:016}").as_bytes(), &[b'v'; 32]).unwrap();
    }
    store.wait_idle();
    let events = store.compaction_events();
    assert!(!events.is_empty(), "sequential fill should still migrate files down");
    assert!(events.iter().all(|e| e.trivial_move), "events: {events:?}");
    let snap = store.ledger().snapshot();
    assert_eq!(snap.host_compaction_bytes, 0);
    store.close().unwrap();
}

// ---------------------------------------------------------------------
// Session behavior against a scripted fake device
// ---------------------------------------------------------------------

fn fake_device_request() -> cokv::protocol::DeviceRequest {
    use cokv::offload::{SplitTask, TaskSide};
    cokv::protocol::DeviceRequest {
        task: SplitTask {
            side: TaskSide::Device,
            key_filter: cokv::KeyFilter::at_or_above(b"m".to_vec()),
            inputs_k: vec![],
            inputs_k1: vec![],
            target_level: 2,
            compaction_id: 7,
        },
        file_number_start: 100,
        file_number_count: 4,
        db_path: "/nonexistent".into(),
        drop_tombstones: false,
        target_file_size: 1 << 20,
        block_size: 4096,
    }
}

/// Scripted peer: accepts one session, replies HELLO, then runs `script`
/// on the first request's id.
fn scripted_device(
    script: impl FnOnce(&mut std::net::TcpStream, u64) + Send + 'static,
) -> (String, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = listener.local_addr().unwrap().to_string();
    let t = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let (msg, _) = read_message(&mut s).unwrap();
        assert!(matches!(msg, SemanticMessage::Hello { .. }));
        write_message(&mut s, &SemanticMessage::Hello { version: PROTOCOL_VERSION }).unwrap();
        let (msg, _) = read_message(&mut s).unwrap();
        let id = match msg {
            SemanticMessage::CompactRequest(r) => r.task.compaction_id,
            other => panic!("expected request, got {other:?}"),
        };
        script(&mut s, id);
    });
    (endpoint, t)
}

#[test]
fn stale_reply_is_discarded() {
    let (endpoint, t) = scripted_device(|s, id| {
        // Stale completion first, then the real one.
        write_message(
            s,
            &SemanticMessage::CompactDone {
                compaction_id: id + 999,
                files: vec![],
                bytes_written: 1,
                device_elapsed_us: 1,
            },
        )
        .unwrap();
        write_message(
            s,
            &SemanticMessage::CompactDone {
                compaction_id: id,
                files: vec![],
                bytes_written: 42,
                device_elapsed_us: 2,
            },
        )
        .unwrap();
    });
    let ledger = Arc::new(MetricsLedger::default());
    let session = DeviceSession::connect(&endpoint, ledger, Duration::from_secs(5)).unwrap();
    let handle = session.request_device_compaction(fake_device_request()).unwrap();
    match handle.wait() {
        DeviceReply::Done { bytes_written, .. } => assert_eq!(bytes_written, 42),
        other => panic!("expected the real completion, got {other:?}"),
    }
    t.join().unwrap();
}

#[test]
fn device_error_reply_resolves_request() {
    let (endpoint, t) = scripted_device(|s, id| {
        write_message(
            s,
            &SemanticMessage::CompactError {
                compaction_id: id,
                code: 2,
                message: "no space".into(),
            },
        )
        .unwrap();
    });
    let ledger = Arc::new(MetricsLedger::default());
    let session = DeviceSession::connect(&endpoint, ledger, Duration::from_secs(5)).unwrap();
    let handle = session.request_device_compaction(fake_device_request()).unwrap();
    match handle.wait() {
        DeviceReply::Error { code, message } => {
            assert_eq!(code, 2);
            assert_eq!(message, "no space");
        }
        other => panic!("expected error reply, got {other:?}"),
    }
    t.join().unwrap();
}

#[test]
fn silent_device_times_out() {
    let (endpoint, t) = scripted_device(|_s, _id| {
        std::thread::sleep(Duration::from_millis(400));
    });
    let ledger = Arc::new(MetricsLedger::default());
    let session = DeviceSession::connect(&endpoint, ledger, Duration::from_millis(100)).unwrap();
    let handle = session.request_device_compaction(fake_device_request()).unwrap();
    assert!(matches!(handle.wait(), DeviceReply::TimedOut));
    t.join().unwrap();
}

#[test]
fn dropped_connection_breaks_pending_request() {
    let (endpoint, t) = scripted_device(|s, _id| {
        let _ = s.shutdown(std::net::Shutdown::Both);
    });
    let ledger = Arc::new(MetricsLedger::default());
    let session = DeviceSession::connect(&endpoint, ledger, Duration::from_secs(30)).unwrap();
    let handle = session.request_device_compaction(fake_device_request()).unwrap();
    let start = std::time::Instant::now();
    assert!(matches!(handle.wait(), DeviceReply::Broken));
    assert!(start.elapsed() < Duration::from_secs(5), "broken transport must resolve fast");
    assert!(session.is_failed());
    t.join().unwrap();
}

#[test]
fn refused_hello_fails_connect() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = listener.local_addr().unwrap().to_string();
    let t = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let _ = read_message(&mut s).unwrap();
        write_message(&mut s, &SemanticMessage::Hello { version: 0 }).unwrap();
    });
    let ledger = Arc::new(MetricsLedger::default());
    let err = match DeviceSession::connect(&endpoint, ledger, Duration::from_secs(5)) {
        Err(e) => e,
        Ok(_) => panic!("connect should fail against a refusing peer"),
    };
    assert!(err.to_string().contains("refused"), "{err}");
    t.join().unwrap();
}

/// The device refuses sessions over an unreadable directory with a
/// version-0 HELLO.
#[test]
fn device_refuses_unreadable_db() {
    let device = TestDevice::start(Path::new("/nonexistent-cokv-db"), 0.0);
    let mut s = std::net::TcpStream::connect(&device.endpoint).unwrap();
    write_message(&mut s, &SemanticMessage::Hello { version: PROTOCOL_VERSION }).unwrap();
    let (reply, _) = read_message(&mut s).unwrap();
    assert_eq!(reply, SemanticMessage::Hello { version: 0 });
}

// ---------------------------------------------------------------------
// Device process kill: fallback keeps the store correct
// ---------------------------------------------------------------------

#[test]
fn killing_device_mid_run_falls_back_to_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_cokv-device"))
        .args(["--db"])
        .arg(dir.path())
        .args(["--listen", "127.0.0.1:0", "--slowdown", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut banner = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut banner).unwrap();
    let endpoint = banner.strip_prefix("LISTENING ").unwrap().trim().to_string();

    let mut cfg = small_cfg(Mode::Cokv, Some(endpoint));
    cfg.device_timeout = Duration::from_secs(5);
    let store = Store::open(dir.path(), cfg).unwrap();
    let ops = gen_verify_ops(31, 20_000);
    let expected = reference_map(&ops);

    let killer = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(150));
        let _ = child.kill();
        let _ = child.wait();
    });
    execute_ops(&store, ops.iter().cloned()).unwrap();
    store.wait_idle();
    killer.join().unwrap();

    assert_eq!(store.scan().unwrap(), expected);
    store.close().unwrap();
}

// ---------------------------------------------------------------------
// Crash consistency: SIGKILL the writer process, replay, compare
// ---------------------------------------------------------------------

/// Child half of the crash test: runs ops forever, printing an ACK line
/// after each acknowledged op. Spawned by `crash_recovery_after_sigkill`;
/// a no-op when run as part of the normal suite.
#[test]
fn crash_child_writer() {
    let Some(dir) = std::env::var_os("COKV_CRASH_DIR") else {
        return;
    };
    let cfg = StoreConfig {
        memtable_capacity: 24 << 10,
        sstable_target_size: 12 << 10,
        block_size: 2 << 10,
        l1_budget: 48 << 10,
        growth_factor: 4,
        ..StoreConfig::default()
    };
    let store = Store::open(std::path::PathBuf::from(dir), cfg).unwrap();
    let ops = gen_verify_ops(4242, 200_000);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, op) in ops.iter().enumerate() {
        match op {
            Op::Put(k, v) => store.put(k, v).unwrap(),
            Op::Delete(k) => store.delete(k).unwrap(),
            Op::Get(_) => {}
        }
        writeln!(out, "ACK {i}").unwrap();
        out.flush().unwrap();
    }
    store.close().unwrap();
}

#[test]
fn crash_recovery_after_sigkill() {
    let dir = tempfile::tempdir().unwrap();
    let exe = std::env::current_exe().unwrap();
    let mut child = Command::new(exe)
        .args(["crash_child_writer", "--exact", "--nocapture"])
        .env("COKV_CRASH_DIR", dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let progress = Arc::new(std::sync::Mutex::new(None::<usize>));
    let reader = {
        let progress = Arc::clone(&progress);
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if let Some(n) = line.rsplit("ACK ").next().and_then(|s| s.parse::<usize>().ok()) {
                    *progress.lock().unwrap() = Some(n);
                }
            }
        })
    };

    // Wait until the child is visibly making progress, let it churn
    // through some flushes and compactions, then pull the plug.
    let deadline = std::time::Instant::now() + Duration::from_secs(60);
    while progress.lock().unwrap().is_none() {
        assert!(std::time::Instant::now() < deadline, "child never produced an ack");
        std::thread::sleep(Duration::from_millis(20));
    }
    std::thread::sleep(Duration::from_millis(700));
    child.kill().unwrap();
    child.wait().unwrap();
    reader.join().unwrap();
    let last_acked = progress.lock().unwrap().expect("child acked at least one op");

    // Reopen and compare against the reference map of some acknowledged
    // prefix at least as long as what we saw acked.
    let store = Store::open(dir.path(), StoreConfig { sync_files: false, ..StoreConfig::default() })
        .unwrap();
    let scan: BTreeMap<Vec<u8>, Vec<u8>> = store.scan().unwrap().into_iter().collect();
    store.close().unwrap();

    let ops = gen_verify_ops(4242, 200_000);
    let mut reference: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    for op in &ops[..=last_acked] {
        match op {
            Op::Put(k, v) => {
                reference.insert(k.clone(), v.clone());
            }
            Op::Delete(k) => {
                reference.remove(k);
            }
            Op::Get(_) => {}
        }
    }

    // Count differing keys, then roll the reference forward one op at a
    // time looking for an exact match within the unacked window.
    let keys: std::collections::BTreeSet<_> = reference.keys().chain(scan.keys()).cloned().collect();
    let mut diff = keys.iter().filter(|k| reference.get(*k) != scan.get(*k)).count();

    let mut matched = diff == 0;
    if !matched {
        for op in &ops[last_acked + 1..] {
            match op {
                Op::Put(k, v) => {
                    let was = reference.get(k) != scan.get(k);
                    reference.insert(k.clone(), v.clone());
                    let now = reference.get(k) != scan.get(k);
                    diff = diff + usize::from(now) - usize::from(was);
                }
                Op::Delete(k) => {
                    let was = reference.get(k) != scan.get(k);
                    reference.remove(k);
                    let now = reference.get(k) != scan.get(k);
                    diff = diff + usize::from(now) - usize::from(was);
                }
                Op::Get(_) => {}
            }
            if diff == 0 {
                matched = true;
                break;
            }
        }
    }
    assert!(
        matched,
        "recovered scan does not correspond to any acknowledged prefix >= {last_acked}"
    );
}
