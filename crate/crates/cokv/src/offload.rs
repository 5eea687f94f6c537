//! Compaction offloading.
//!
//! Eligible compactions (one L_k input, at least two L_{k+1} overlaps) are
//! split in two: the first half of the overlapping files plus the low key
//! range stay on the host, the second half plus the high key range go to
//! the device. The split key is the min key of the first file handed to
//! the device; the host works on `[-inf, split)` and the device on
//! `[split, +inf)`, so no key can be emitted twice. Both halves run
//! concurrently and their outputs are folded into a single version edit.
//! Any device failure falls back to the baseline path for that task.

use log::warn;

use crate::compaction::{run_baseline_compaction, CompactionEnv, CompactionTask};
use crate::error::{Error, Result};
use crate::merge::merge_run;
use crate::metrics::CompactionEvent;
use crate::protocol::DeviceRequest;
use crate::session::{DeviceReply, DeviceSession};
use crate::sstable::write_sorted_run;
use crate::types::{KeyFilter, SstMeta};
use crate::version::VersionEdit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSide {
    Host,
    Device,
}

/// One side of a split compaction.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTask {
    pub side: TaskSide,
    /// Half-open key interval this side is responsible for.
    pub key_filter: KeyFilter,
    /// The shared L_k input file(s); both sides read them, filtered.
    pub inputs_k: Vec<SstMeta>,
    /// This side's subset of the L_{k+1} inputs.
    pub inputs_k1: Vec<SstMeta>,
    pub target_level: usize,
    pub compaction_id: u64,
}

/// A task can be offloaded when it compacts a single L_k file (k >= 1)
/// into at least two L_{k+1} files; everything else runs the baseline path.
pub fn offload_eligible(task: &CompactionTask) -> bool {
    task.level_k >= 1 && task.inputs_k.len() == 1 && task.inputs_k1.len() >= 2
}

/// Split the L_{k+1} inputs floor(m/2) / ceil(m/2) and the key space at the
/// min key of the first device-side file.
pub fn csa_split(task: &CompactionTask, compaction_id: u64) -> Result<(SplitTask, SplitTask)> {
    if !offload_eligible(task) {
        return Err(Error::contract(format!(
            "task not eligible for offload: level {} with {}+{} inputs",
            task.level_k,
            task.inputs_k.len(),
            task.inputs_k1.len()
        )));
    }
    debug_assert!(task.inputs_k1.windows(2).all(|w| w[0].range.min_key <= w[1].range.min_key));

    let m = task.inputs_k1.len();
    let sub1 = task.inputs_k1[..m / 2].to_vec();
    let sub2 = task.inputs_k1[m / 2..].to_vec();
    let split_key = sub2[0].range.min_key.clone();

    let host = SplitTask {
        side: TaskSide::Host,
        key_filter: KeyFilter::below(split_key.clone()),
        inputs_k: task.inputs_k.clone(),
        inputs_k1: sub1,
        target_level: task.target_level,
        compaction_id,
    };
    let device = SplitTask {
        side: TaskSide::Device,
        key_filter: KeyFilter::at_or_above(split_key),
        inputs_k: task.inputs_k.clone(),
        inputs_k1: sub2,
        target_level: task.target_level,
        compaction_id,
    };
    Ok((host, device))
}

/// Fold both sides' outputs into one edit, deleting every input of the
/// original task. Fails if any two output ranges touch.
pub fn integrate_results(
    task: &CompactionTask,
    host_files: &[SstMeta],
    device_files: &[SstMeta],
    next_seq: u64,
) -> Result<VersionEdit> {
    let mut combined: Vec<SstMeta> = host_files.iter().chain(device_files.iter()).cloned().collect();
    combined.sort_by(|a, b| a.range.min_key.cmp(&b.range.min_key));
    for w in combined.windows(2) {
        if w[0].range.max_key >= w[1].range.min_key {
            return Err(Error::Integration(format!(
                "output files {} and {} overlap",
                w[0].file_number, w[1].file_number
            )));
        }
    }

    let deleted = task
        .inputs_k
        .iter()
        .map(|m| (task.level_k, m.file_number))
        .chain(task.inputs_k1.iter().map(|m| (task.target_level, m.file_number)))
        .collect();
    Ok(VersionEdit {
        deleted,
        added: combined.into_iter().map(|m| (task.target_level, m)).collect(),
        next_seq,
    })
}

/// Run one collaborative compaction: dispatch the device half, merge the
/// host half locally, then integrate. Ineligible tasks and any device
/// failure take the baseline path; records are never lost or duplicated.
pub fn run_cokv_compaction(
    env: &CompactionEnv<'_>,
    task: &CompactionTask,
    session: &DeviceSession,
    compaction_id: u64,
    file_number_block: u32,
) -> Result<(VersionEdit, CompactionEvent)> {
    if !offload_eligible(task) {
        return run_baseline_compaction(env, task);
    }

    let (host_task, device_task) = csa_split(task, compaction_id)?;

    let block_start = env
        .next_file
        .fetch_add(file_number_block as u64, std::sync::atomic::Ordering::SeqCst);
    let request = DeviceRequest {
        task: device_task,
        file_number_start: block_start,
        file_number_count: file_number_block,
        db_path: env.dir.to_string_lossy().into_owned(),
        drop_tombstones: env.drop_tombstones,
        target_file_size: env.target_file_size,
        block_size: env.block_size as u32,
    };

    let handle = match session.request_device_compaction(request) {
        Ok(h) => h,
        Err(e) => {
            warn!("device request failed ({e}); falling back to baseline");
            return run_baseline_compaction(env, task);
        }
    };

    // Host half runs while the device chews on its half.
    let host_files = (|| {
        let iters = env.open_input_iters(task, &host_task.key_filter, Some(&host_task.inputs_k1))?;
        let merged = merge_run(iters, host_task.key_filter.clone(), env.drop_tombstones);
        let mut alloc = || Ok(env.alloc_file());
        write_sorted_run(
            merged,
            env.dir,
            &mut alloc,
            env.target_file_size,
            env.block_size,
            env.sync,
        )
    })()?;
    let host_bytes: u64 = host_files.iter().map(|m| m.file_size).sum();
    env.ledger.add_host_compaction_bytes(host_bytes);

    let cleanup_host = |files: &[SstMeta]| {
        for m in files {
            let _ = std::fs::remove_file(m.path_in(env.dir));
        }
    };

    match handle.wait() {
        DeviceReply::Done { files, bytes_written, device_elapsed_us: _ } => {
            env.ledger.add_device_written_bytes(bytes_written);
            match integrate_results(task, &host_files, &files, env.next_seq) {
                Ok(edit) => {
                    let event = CompactionEvent {
                        level: task.level_k,
                        inputs_k: task.inputs_k.len(),
                        inputs_k1: task.inputs_k1.len(),
                        trivial_move: false,
                        offloaded: true,
                        host_output_bytes: host_bytes,
                        device_output_bytes: bytes_written,
                    };
                    Ok((edit, event))
                }
                Err(e) => {
                    warn!("integration failed ({e}); retrying via baseline");
                    cleanup_host(&host_files);
                    for m in &files {
                        let _ = std::fs::remove_file(m.path_in(env.dir));
                    }
                    run_baseline_compaction(env, task)
                }
            }
        }
        DeviceReply::Error { code, message } => {
            warn!("device reported error {code}: {message}; retrying via baseline");
            cleanup_host(&host_files);
            run_baseline_compaction(env, task)
        }
        DeviceReply::TimedOut => {
            warn!("device timed out; retrying via baseline");
            cleanup_host(&host_files);
            run_baseline_compaction(env, task)
        }
        DeviceReply::Broken => {
            warn!("device session broken; retrying via baseline");
            cleanup_host(&host_files);
            run_baseline_compaction(env, task)
        }
    }
}
