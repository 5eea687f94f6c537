//! Baseline leveled compaction: trigger policy, victim selection, and the
//! merge-rewrite itself. The cokv offload path reuses everything here and
//! only changes who executes which half.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::config::StoreConfig;
use crate::error::Result;
use crate::merge::merge_run;
use crate::metrics::{CompactionEvent, MetricsLedger};
use crate::sstable::{write_sorted_run, Table, TableCache, TableIter};
use crate::types::{KeyFilter, KeyRange, SstMeta};
use crate::version::{Version, VersionEdit};

/// Inputs of one compaction: the L_k victim file(s) and every L_{k+1} file
/// whose range overlaps their union range.
#[derive(Debug, Clone)]
pub struct CompactionTask {
    pub level_k: usize,
    pub inputs_k: Vec<SstMeta>,
    /// Sorted by range.min_key.
    pub inputs_k1: Vec<SstMeta>,
    pub target_level: usize,
}

impl CompactionTask {
    pub fn union_range(&self) -> KeyRange {
        let mut it = self.inputs_k.iter();
        let first = it.next().expect("task has at least one input");
        it.fold(first.range.clone(), |acc, m| acc.union(&m.range))
    }

    pub fn input_count(&self) -> usize {
        self.inputs_k.len() + self.inputs_k1.len()
    }
}

/// Closed-interval overlap test.
pub fn key_ranges_overlap(a: &KeyRange, b: &KeyRange) -> bool {
    a.overlaps(b)
}

/// Lowest level in need of compaction: L0 by file count, deeper levels by
/// byte budget. The deepest level never triggers.
pub fn should_trigger(version: &Version, cfg: &StoreConfig) -> Option<usize> {
    if version.levels[0].len() >= cfg.l0_trigger {
        return Some(0);
    }
    for k in 1..version.levels.len().saturating_sub(1) {
        if !version.levels[k].is_empty() && version.level_bytes(k) > cfg.level_budget(k) {
            return Some(k);
        }
    }
    None
}

/// Select the inputs for a compaction at level `k`.
///
/// For k >= 1 exactly one victim is chosen by a round-robin cursor: the
/// file with the smallest min key strictly greater than the cursor,
/// wrapping to the first file. For L0 the oldest file seeds a transitive
/// closure over overlapping L0 files.
pub fn pick_compaction(
    version: &Version,
    k: usize,
    cursor: &mut Option<Vec<u8>>,
) -> CompactionTask {
    let inputs_k: Vec<SstMeta> = if k == 0 {
        let l0 = &version.levels[0];
        let oldest = l0
            .iter()
            .min_by_key(|m| m.file_number)
            .expect("trigger implies non-empty L0");
        let mut picked: Vec<SstMeta> = vec![oldest.clone()];
        let mut range = oldest.range.clone();
        loop {
            let before = picked.len();
            for m in l0 {
                if picked.iter().all(|p| p.file_number != m.file_number)
                    && m.range.overlaps(&range)
                {
                    range = range.union(&m.range);
                    picked.push(m.clone());
                }
            }
            if picked.len() == before {
                break;
            }
        }
        picked.sort_by_key(|m| m.file_number);
        picked
    } else {
        let lvl = &version.levels[k];
        debug_assert!(!lvl.is_empty());
        let pick = match cursor {
            Some(c) => lvl
                .iter()
                .find(|m| m.range.min_key.as_slice() > c.as_slice())
                .unwrap_or(&lvl[0]),
            None => &lvl[0],
        };
        *cursor = Some(pick.range.min_key.clone());
        vec![pick.clone()]
    };

    let union = inputs_k
        .iter()
        .skip(1)
        .fold(inputs_k[0].range.clone(), |acc, m| acc.union(&m.range));
    let target = k + 1;
    let inputs_k1: Vec<SstMeta> = if target < version.levels.len() {
        version.levels[target]
            .iter()
            .filter(|m| key_ranges_overlap(&m.range, &union))
            .cloned()
            .collect()
    } else {
        Vec::new()
    };

    CompactionTask { level_k: k, inputs_k, inputs_k1, target_level: target }
}

/// Everything a compaction needs from the store.
pub struct CompactionEnv<'a> {
    pub dir: &'a Path,
    pub target_file_size: u64,
    pub block_size: usize,
    pub sync: bool,
    /// Safe only when no level deeper than the target can hold the key.
    pub drop_tombstones: bool,
    /// Sequence watermark stamped on the resulting edit.
    pub next_seq: u64,
    pub next_file: &'a AtomicU64,
    pub ledger: &'a MetricsLedger,
    pub cache: &'a TableCache,
}

impl CompactionEnv<'_> {
    pub fn alloc_file(&self) -> u64 {
        self.next_file.fetch_add(1, Ordering::SeqCst)
    }

    pub fn open_input_iters(
        &self,
        task: &CompactionTask,
        filter: &KeyFilter,
        k1_subset: Option<&[SstMeta]>,
    ) -> Result<Vec<TableIter>> {
        let mut iters = Vec::new();
        let k1 = k1_subset.unwrap_or(&task.inputs_k1);
        for meta in task.inputs_k.iter().chain(k1.iter()) {
            let table: Arc<Table> = self.cache.get(meta)?;
            iters.push(table.iter(filter.clone()));
        }
        Ok(iters)
    }

    pub fn delete_all_inputs(&self, task: &CompactionTask) -> Vec<(usize, u64)> {
        task.inputs_k
            .iter()
            .map(|m| (task.level_k, m.file_number))
            .chain(task.inputs_k1.iter().map(|m| (task.target_level, m.file_number)))
            .collect()
    }
}

/// Merge all task inputs and rewrite them into the target level. A single
/// input with no overlap is re-linked without touching data.
pub fn run_baseline_compaction(
    env: &CompactionEnv<'_>,
    task: &CompactionTask,
) -> Result<(VersionEdit, CompactionEvent)> {
    let mut event = CompactionEvent {
        level: task.level_k,
        inputs_k: task.inputs_k.len(),
        inputs_k1: task.inputs_k1.len(),
        trivial_move: false,
        offloaded: false,
        host_output_bytes: 0,
        device_output_bytes: 0,
    };

    if task.inputs_k1.is_empty() && task.inputs_k.len() == 1 {
        let moved = task.inputs_k[0].clone();
        event.trivial_move = true;
        let edit = VersionEdit {
            deleted: vec![(task.level_k, moved.file_number)],
            added: vec![(task.target_level, moved)],
            next_seq: env.next_seq,
        };
        return Ok((edit, event));
    }

    let iters = env.open_input_iters(task, &KeyFilter::all(), None)?;
    let merged = merge_run(iters, KeyFilter::all(), env.drop_tombstones);
    let mut alloc = || Ok(env.alloc_file());
    let outputs = write_sorted_run(
        merged,
        env.dir,
        &mut alloc,
        env.target_file_size,
        env.block_size,
        env.sync,
    )?;

    let out_bytes: u64 = outputs.iter().map(|m| m.file_size).sum();
    env.ledger.add_host_compaction_bytes(out_bytes);
    event.host_output_bytes = out_bytes;

    let edit = VersionEdit {
        deleted: env.delete_all_inputs(task),
        added: outputs.into_iter().map(|m| (task.target_level, m)).collect(),
        next_seq: env.next_seq,
    };
    Ok((edit, event))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n: u64, lo: &str, hi: &str, size: u64) -> SstMeta {
        SstMeta {
            file_number: n,
            file_size: size,
            record_count: 1,
            range: KeyRange::new(lo.as_bytes().to_vec(), hi.as_bytes().to_vec()),
        }
    }

    fn version_with(levels: Vec<Vec<SstMeta>>) -> Version {
        let mut v = Version::new(levels.len().max(4));
        for (k, l) in levels.into_iter().enumerate() {
            v.levels[k] = l;
        }
        v
    }

    #[test]
    fn trigger_empty_store_none() {
        let cfg = StoreConfig::default();
        assert_eq!(should_trigger(&Version::new(4), &cfg), None);
    }

    #[test]
    fn trigger_l0_by_file_count() {
        let cfg = StoreConfig::default();
        let v = version_with(vec![vec![
            meta(1, "a", "b", 10),
            meta(2, "c", "d", 10),
            meta(3, "e", "f", 10),
            meta(4, "g", "h", 10),
        ]]);
        assert_eq!(should_trigger(&v, &cfg), Some(0));
    }

    #[test]
    fn trigger_lowest_level_ties() {
        let mut cfg = StoreConfig::default();
        cfg.l1_budget = 100;
        cfg.growth_factor = 10;
        // L1 at 1.2x budget, L2 at 1.1x budget -> level 1 wins.
        let v = version_with(vec![
            vec![],
            vec![meta(1, "a", "b", 120)],
            vec![meta(2, "c", "d", 1100)],
        ]);
        assert_eq!(should_trigger(&v, &cfg), Some(1));
    }

    #[test]
    fn pick_finds_overlapping_k1_files() {
        let v = version_with(vec![
            vec![],
            vec![meta(1, "00", "09", 10)],
            vec![meta(2, "00", "04", 10), meta(3, "05", "09", 10), meta(4, "10", "14", 10)],
        ]);
        let mut cursor = None;
        let task = pick_compaction(&v, 1, &mut cursor);
        assert_eq!(task.inputs_k.len(), 1);
        let nums: Vec<u64> = task.inputs_k1.iter().map(|m| m.file_number).collect();
        assert_eq!(nums, vec![2, 3]);
    }

    #[test]
    fn pick_trivial_move_candidate() {
        let v = version_with(vec![vec![], vec![meta(1, "20", "30", 10)], vec![]]);
        let mut cursor = None;
        let task = pick_compaction(&v, 1, &mut cursor);
        assert!(task.inputs_k1.is_empty());
    }

    #[test]
    fn cursor_round_robin_wraps() {
        let v = version_with(vec![
            vec![],
            vec![meta(1, "a", "b", 10), meta(2, "m", "n", 10)],
            vec![],
        ]);
        let mut cursor = None;
        assert_eq!(pick_compaction(&v, 1, &mut cursor).inputs_k[0].file_number, 1);
        assert_eq!(pick_compaction(&v, 1, &mut cursor).inputs_k[0].file_number, 2);
        // Past the last file: wrap to the first.
        assert_eq!(pick_compaction(&v, 1, &mut cursor).inputs_k[0].file_number, 1);
    }

    #[test]
    fn l0_pick_transitively_closes() {
        let v = version_with(vec![vec![
            meta(1, "a", "f", 10), // oldest
            meta(2, "e", "k", 10), // overlaps 1
            meta(3, "j", "p", 10), // overlaps 2 -> pulled in transitively
            meta(4, "x", "z", 10), // disjoint
        ]]);
        let mut cursor = None;
        let task = pick_compaction(&v, 0, &mut cursor);
        let nums: Vec<u64> = task.inputs_k.iter().map(|m| m.file_number).collect();
        assert_eq!(nums, vec![1, 2, 3]);
    }
}
