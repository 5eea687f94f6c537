//! Run reports: write amplification, throughput, latency percentiles, and
//! the compaction shape histogram.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::metrics::{CompactionEvent, MetricsLedger};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub workload: String,
    pub seed: u64,
    pub op_count: u64,
    pub user_bytes: u64,
    pub host_written_bytes: u64,
    /// None when no user bytes were written (undefined, not infinite).
    pub write_amplification: Option<f64>,
    pub throughput_mb_s: f64,
    pub ops_per_sec: f64,
    pub mean_update_latency_us: Option<f64>,
    pub p95_update_latency_us: Option<f64>,
    pub mean_read_latency_us: Option<f64>,
    pub p95_read_latency_us: Option<f64>,
    pub device_written_bytes: u64,
    pub transfer_bytes: u64,
    pub elapsed_seconds: f64,
    pub compaction_histogram: CompactionShape,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactionShape {
    pub total: u64,
    /// Fraction of compactions with exactly one L_k input.
    pub single_input_fraction: Option<f64>,
    /// Fraction of compactions with at least two L_{k+1} overlaps.
    pub k1_ge2_fraction: Option<f64>,
    pub entries: Vec<ShapeEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub inputs_k: usize,
    pub inputs_k1: usize,
    pub count: u64,
}

/// Histogram of (|inputs_k|, |inputs_k1|) over a run's compaction log.
pub fn compaction_shape_stats(events: &[CompactionEvent]) -> CompactionShape {
    let mut buckets: std::collections::BTreeMap<(usize, usize), u64> = Default::default();
    for e in events {
        *buckets.entry((e.inputs_k, e.inputs_k1)).or_default() += 1;
    }
    let total = events.len() as u64;
    let single = events.iter().filter(|e| e.inputs_k == 1).count() as u64;
    let wide = events.iter().filter(|e| e.inputs_k1 >= 2).count() as u64;
    CompactionShape {
        total,
        single_input_fraction: (total > 0).then(|| single as f64 / total as f64),
        k1_ge2_fraction: (total > 0).then(|| wide as f64 / total as f64),
        entries: buckets
            .into_iter()
            .map(|((inputs_k, inputs_k1), count)| ShapeEntry { inputs_k, inputs_k1, count })
            .collect(),
    }
}

pub fn compute_report(
    ledger: &MetricsLedger,
    events: &[CompactionEvent],
    mode: &str,
    workload: &str,
    seed: u64,
    elapsed: Duration,
) -> Report {
    let snap = ledger.snapshot();
    let secs = elapsed.as_secs_f64();
    let (updates, reads) = ledger.latencies();
    Report {
        mode: mode.to_string(),
        workload: workload.to_string(),
        seed,
        op_count: snap.op_count,
        user_bytes: snap.user_bytes,
        host_written_bytes: snap.host_written_bytes,
        write_amplification: snap.write_amplification(),
        throughput_mb_s: if secs > 0.0 {
            snap.user_bytes as f64 / (1 << 20) as f64 / secs
        } else {
            0.0
        },
        ops_per_sec: if secs > 0.0 { snap.op_count as f64 / secs } else { 0.0 },
        mean_update_latency_us: mean(&updates),
        p95_update_latency_us: p95(&updates),
        mean_read_latency_us: mean(&reads),
        p95_read_latency_us: p95(&reads),
        device_written_bytes: snap.device_written_bytes,
        transfer_bytes: snap.transfer_bytes,
        elapsed_seconds: secs,
        compaction_histogram: compaction_shape_stats(events),
    }
}

fn mean(sorted_us: &[u64]) -> Option<f64> {
    if sorted_us.is_empty() {
        None
    } else {
        Some(sorted_us.iter().sum::<u64>() as f64 / sorted_us.len() as f64)
    }
}

/// Input must be sorted ascending.
fn p95(sorted_us: &[u64]) -> Option<f64> {
    if sorted_us.is_empty() {
        return None;
    }
    let idx = ((sorted_us.len() as f64 * 0.95).ceil() as usize).min(sorted_us.len()) - 1;
    Some(sorted_us[idx] as f64)
}

impl Report {
    /// One-screen human-readable rendering.
    pub fn human_table(&self) -> String {
        let mut s = String::new();
        let wa = self
            .write_amplification
            .map_or("undefined".to_string(), |v| format!("{v:.3}"));
        s.push_str(&format!("mode                 {}\n", self.mode));
        s.push_str(&format!("workload             {}\n", self.workload));
        s.push_str(&format!("seed                 {}\n", self.seed));
        s.push_str(&format!("operations           {}\n", self.op_count));
        s.push_str(&format!("user bytes           {}\n", self.user_bytes));
        s.push_str(&format!("host written bytes   {}\n", self.host_written_bytes));
        s.push_str(&format!("write amplification  {wa}\n"));
        s.push_str(&format!("throughput           {:.2} MB/s\n", self.throughput_mb_s));
        s.push_str(&format!("ops/sec              {:.0}\n", self.ops_per_sec));
        if let (Some(m), Some(p)) = (self.mean_update_latency_us, self.p95_update_latency_us) {
            s.push_str(&format!("update latency       mean {m:.1}us  p95 {p:.1}us\n"));
        }
        if let (Some(m), Some(p)) = (self.mean_read_latency_us, self.p95_read_latency_us) {
            s.push_str(&format!("read latency         mean {m:.1}us  p95 {p:.1}us\n"));
        }
        s.push_str(&format!("device written bytes {}\n", self.device_written_bytes));
        s.push_str(&format!("transfer bytes       {}\n", self.transfer_bytes));
        s.push_str(&format!("elapsed              {:.2}s\n", self.elapsed_seconds));
        let h = &self.compaction_histogram;
        s.push_str(&format!("compactions          {}\n", h.total));
        if let (Some(a), Some(b)) = (h.single_input_fraction, h.k1_ge2_fraction) {
            s.push_str(&format!(
                "  single L_k input   {:.1}%\n  >=2 L_k+1 overlaps {:.1}%\n",
                a * 100.0,
                b * 100.0
            ));
        }
        s
    }
}
