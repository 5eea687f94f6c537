//! Drives an operation stream against a store, timing each call at the
//! client boundary.

use std::time::{Duration, Instant};

use crate::error::Result;
use crate::store::Store;

use super::workload::{gen_operations, Op, WorkloadSpec};

/// Apply each op, recording per-class latency in the store's ledger.
pub fn execute_ops(store: &Store, ops: impl Iterator<Item = Op>) -> Result<()> {
    let ledger = std::sync::Arc::clone(store.ledger());
    for op in ops {
        match op {
            Op::Put(k, v) => {
                let t0 = Instant::now();
                store.put(&k, &v)?;
                ledger.record_update_latency(t0.elapsed().as_micros() as u64);
            }
            Op::Delete(k) => {
                let t0 = Instant::now();
                store.delete(&k)?;
                ledger.record_update_latency(t0.elapsed().as_micros() as u64);
            }
            Op::Get(k) => {
                let t0 = Instant::now();
                store.get(&k)?;
                ledger.record_read_latency(t0.elapsed().as_micros() as u64);
            }
        }
    }
    Ok(())
}

/// Run the whole workload and drain background work; returns wall time.
pub fn run_workload(store: &Store, spec: &WorkloadSpec) -> Result<Duration> {
    let start = Instant::now();
    execute_ops(store, gen_operations(spec))?;
    store.wait_idle();
    Ok(start.elapsed())
}
