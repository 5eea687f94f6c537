//! Command-line entry point: run benchmarks in either compaction mode,
//! host the device process, verify seeded runs against a reference map,
//! and summarize compaction logs.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use clap::{Args as ClapArgs, Parser, Subcommand};

use cokv::bench::{
    compaction_shape_stats, compute_report, execute_ops, gen_verify_ops, run_workload, Op,
    WorkloadKind, WorkloadSpec,
};
use cokv::device::{DeviceConfig, DeviceServer};
use cokv::metrics::CompactionEvent;
use cokv::{Mode, Store, StoreConfig};

#[derive(Parser)]
#[command(name = "cokv", about = "LSM key-value store with collaborative compaction", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and emit a report.
    Bench(BenchArgs),
    /// Run the device main loop in this process.
    Device(DeviceArgs),
    /// Replay a seeded put/delete stream and compare the full scan
    /// against an in-memory reference map.
    Verify(VerifyArgs),
    /// Print compaction shape statistics from a run log.
    Stats(StatsArgs),
}

#[derive(ClapArgs)]
struct StoreFlags {
    /// Compaction mode.
    #[arg(long, default_value = "baseline")]
    mode: Mode,

    /// Database directory.
    #[arg(long, default_value = "./cokv-db")]
    db: PathBuf,

    /// Device endpoint (host:port) for cokv mode.
    #[arg(long)]
    device_endpoint: Option<String>,

    /// Spawn a device process automatically and tear it down on exit.
    #[arg(long)]
    auto_spawn_device: bool,

    /// Slowdown factor for the auto-spawned device.
    #[arg(long, default_value_t = 0.0)]
    device_slowdown: f64,

    /// L1 byte budget.
    #[arg(long, default_value_t = 10 << 20)]
    l1_budget: u64,

    /// Per-level size growth factor.
    #[arg(long, default_value_t = 10)]
    growth_factor: u64,
}

#[derive(ClapArgs)]
struct BenchArgs {
    #[command(flatten)]
    store: StoreFlags,

    /// Workload kind.
    #[arg(long, default_value = "fillrandom")]
    workload: WorkloadKind,

    /// Operation count for fillseq/fillrandom.
    #[arg(long, default_value_t = 1_000_000)]
    num: u64,

    #[arg(long, default_value_t = 16)]
    key_size: usize,

    #[arg(long)]
    value_size: Option<usize>,

    /// YCSB run phase read fraction.
    #[arg(long, default_value_t = 0.0)]
    read_ratio: f64,

    #[arg(long, default_value_t = 0.99)]
    zipf_theta: f64,

    /// YCSB load phase volume in bytes.
    #[arg(long, default_value_t = 1 << 30)]
    load_bytes: u64,

    /// YCSB run phase volume in bytes.
    #[arg(long, default_value_t = 2 << 30)]
    run_bytes: u64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Write the JSON report here (printed to stdout otherwise).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(ClapArgs)]
struct DeviceArgs {
    #[arg(long)]
    db: PathBuf,

    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,

    #[arg(long, default_value_t = 0.0)]
    slowdown: f64,
}

#[derive(ClapArgs)]
struct VerifyArgs {
    #[command(flatten)]
    store: StoreFlags,

    #[arg(long, default_value_t = 100_000)]
    num: u64,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(ClapArgs)]
struct StatsArgs {
    /// Compaction log (JSON lines) written by `bench`.
    log: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Device(args) => cmd_device(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Stats(args) => cmd_stats(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// A spawned device child; killed on drop if it has not exited.
struct SpawnedDevice {
    child: Child,
}

impl SpawnedDevice {
    fn spawn(db: &Path, slowdown: f64) -> Result<(SpawnedDevice, String), String> {
        let exe = std::env::current_exe()
            .map_err(|e| format!("cannot locate own binary: {e}"))?
            .parent()
            .map(|d| d.join("cokv-device"))
            .filter(|p| p.exists())
            .ok_or_else(|| "cokv-device binary not found next to cokv".to_string())?;
        let mut child = Command::new(exe)
            .arg("--db")
            .arg(db)
            .arg("--listen")
            .arg("127.0.0.1:0")
            .arg("--slowdown")
            .arg(slowdown.to_string())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| format!("failed to spawn device: {e}"))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .map_err(|e| format!("device produced no endpoint: {e}"))?;
        let endpoint = line
            .strip_prefix("LISTENING ")
            .map(|s| s.trim().to_string())
            .ok_or_else(|| format!("unexpected device banner {line:?}"))?;
        Ok((SpawnedDevice { child }, endpoint))
    }

    /// Give the device a moment to exit after SHUTDOWN, then make sure.
    fn reap(mut self) {
        for _ in 0..50 {
            if matches!(self.child.try_wait(), Ok(Some(_))) {
                return;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for SpawnedDevice {
    fn drop(&mut self) {
        if !matches!(self.child.try_wait(), Ok(Some(_))) {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

/// Resolve mode flags into a store config, spawning a device if asked.
fn setup_store(flags: &StoreFlags) -> Result<(StoreConfig, Option<SpawnedDevice>), ExitCode> {
    let mut cfg = StoreConfig {
        mode: flags.mode,
        l1_budget: flags.l1_budget,
        growth_factor: flags.growth_factor,
        device_endpoint: flags.device_endpoint.clone(),
        ..StoreConfig::default()
    };
    let mut spawned = None;
    if flags.mode == Mode::Cokv && cfg.device_endpoint.is_none() {
        if !flags.auto_spawn_device {
            eprintln!("cokv mode needs --device-endpoint or --auto-spawn-device");
            return Err(ExitCode::from(2));
        }
        std::fs::create_dir_all(&flags.db).map_err(|e| {
            eprintln!("cannot create {}: {e}", flags.db.display());
            ExitCode::from(1)
        })?;
        let (dev, endpoint) = SpawnedDevice::spawn(&flags.db, flags.device_slowdown)
            .map_err(|e| {
                eprintln!("{e}");
                ExitCode::from(1)
            })?;
        cfg.device_endpoint = Some(endpoint);
        spawned = Some(dev);
    }
    Ok((cfg, spawned))
}

fn teardown(store: Store, spawned: Option<SpawnedDevice>) -> Result<(), cokv::Error> {
    if spawned.is_some() {
        store.shutdown_device();
    }
    let res = store.close();
    if let Some(dev) = spawned {
        dev.reap();
    }
    res
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode, cokv::Error> {
    let (cfg, spawned) = match setup_store(&args.store) {
        Ok(v) => v,
        Err(code) => return Ok(code),
    };
    let spec = WorkloadSpec {
        kind: args.workload,
        num_ops: args.num,
        key_size: args.key_size,
        value_size: args.value_size.unwrap_or(match args.workload {
            WorkloadKind::Ycsb => 1024,
            _ => 100,
        }),
        read_ratio: args.read_ratio,
        zipf_theta: args.zipf_theta,
        load_bytes: args.load_bytes,
        run_bytes: args.run_bytes,
        seed: args.seed,
    };

    let store = Store::open(&args.store.db, cfg)?;
    let elapsed = run_workload(&store, &spec)?;
    let events = store.compaction_events();
    let report = compute_report(
        store.ledger(),
        &events,
        &args.store.mode.to_string(),
        &format!("{:?}", args.workload).to_lowercase(),
        args.seed,
        elapsed,
    );

    write_compaction_log(&args.store.db.join("compaction.log"), &events)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.report {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    print!("{}", report.human_table());

    teardown(store, spawned)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_device(args: DeviceArgs) -> Result<ExitCode, cokv::Error> {
    let server = DeviceServer::bind(DeviceConfig {
        db_path: args.db,
        listen: args.listen,
        slowdown_factor: args.slowdown,
    })?;
    println!("LISTENING {}", server.local_addr()?);
    std::io::stdout().flush()?;
    server.serve()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, cokv::Error> {
    let (cfg, spawned) = match setup_store(&args.store) {
        Ok(v) => v,
        Err(code) => return Ok(code),
    };
    let store = Store::open(&args.store.db, cfg)?;

    let ops = gen_verify_ops(args.seed, args.num);
    let mut reference: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    for op in &ops {
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
    let start = Instant::now();
    execute_ops(&store, ops.into_iter())?;
    store.wait_idle();

    let scan = store.scan()?;
    let expected: Vec<(Vec<u8>, Vec<u8>)> = reference.into_iter().collect();
    let digest = store.scan_digest()?;
    let divergence = first_divergence(&scan, &expected);
    println!(
        "verify seed={} ops={} mode={} elapsed={:.2}s digest={digest}",
        args.seed,
        args.num,
        args.store.mode,
        start.elapsed().as_secs_f64(),
    );
    teardown(store, spawned)?;
    match divergence {
        None => {
            println!("OK: scan matches reference map");
            Ok(ExitCode::SUCCESS)
        }
        Some(key) => {
            eprintln!("MISMATCH at key {:?}", String::from_utf8_lossy(&key));
            Ok(ExitCode::from(1))
        }
    }
}

fn first_divergence(
    scan: &[(Vec<u8>, Vec<u8>)],
    expected: &[(Vec<u8>, Vec<u8>)],
) -> Option<Vec<u8>> {
    for (got, want) in scan.iter().zip(expected.iter()) {
        if got != want {
            return Some(want.0.clone());
        }
    }
    match scan.len().cmp(&expected.len()) {
        std::cmp::Ordering::Less => Some(expected[scan.len()].0.clone()),
        std::cmp::Ordering::Greater => Some(scan[expected.len()].0.clone()),
        std::cmp::Ordering::Equal => None,
    }
}

fn cmd_stats(args: StatsArgs) -> Result<ExitCode, cokv::Error> {
    let data = std::fs::read_to_string(&args.log)?;
    let events: Vec<CompactionEvent> = data
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| cokv::Error::Corruption(format!("bad compaction log: {e}")))?;
    let shape = compaction_shape_stats(&events);
    println!("compactions: {}", shape.total);
    if let (Some(a), Some(b)) = (shape.single_input_fraction, shape.k1_ge2_fraction) {
        println!("single L_k input fraction:   {:.3}", a);
        println!(">=2 L_k+1 overlaps fraction: {:.3}", b);
    }
    println!("{:>9} {:>10} {:>8}", "inputs_k", "inputs_k1", "count");
    for e in &shape.entries {
        println!("{:>9} {:>10} {:>8}", e.inputs_k, e.inputs_k1, e.count);
    }
    Ok(ExitCode::SUCCESS)
}

fn write_compaction_log(path: &Path, events: &[CompactionEvent]) -> Result<(), cokv::Error> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
