//! The device process: binds a listener, prints the bound endpoint, and
//! serves device-side compactions until it receives SHUTDOWN.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cokv::device::{DeviceConfig, DeviceServer};

#[derive(Parser)]
#[command(name = "cokv-device", about = "Emulated NDP device for cokv collaborative compaction")]
struct Args {
    /// Database directory shared with the host.
    #[arg(long)]
    db: PathBuf,

    /// Listen endpoint; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,

    /// Artificial per-byte processing delay multiplier (0 = none).
    #[arg(long, default_value_t = 0.0)]
    slowdown: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let cfg = DeviceConfig { db_path: args.db, listen: args.listen, slowdown_factor: args.slowdown };
    let server = match DeviceServer::bind(cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("bind failed: {e}");
            return ExitCode::from(1);
        }
    };
    match server.local_addr() {
        Ok(addr) => {
            // The parent reads this line to learn the chosen port.
            println!("LISTENING {addr}");
            let _ = std::io::stdout().flush();
        }
        Err(e) => {
            eprintln!("no local address: {e}");
            return ExitCode::from(1);
        }
    }
    match server.serve() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("device error: {e}");
            ExitCode::from(1)
        }
    }
}
