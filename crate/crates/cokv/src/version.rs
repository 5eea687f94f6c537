//! Versioned view of the level structure.
//!
//! A `Version` is immutable once installed; mutations go through
//! `VersionEdit`s that are validated and logged to the manifest before the
//! new version becomes visible. L0 files may overlap (flush order); every
//! deeper level keeps its files sorted by min key with pairwise-disjoint
//! ranges.

use crate::error::{Error, Result};
use crate::types::SstMeta;

#[derive(Debug, Clone, Default)]
pub struct Version {
    /// levels[0] is L0 ordered oldest-to-newest by file number;
    /// levels[k] for k >= 1 is sorted by range.min_key.
    pub levels: Vec<Vec<SstMeta>>,
}

impl Version {
    pub fn new(max_levels: usize) -> Version {
        Version { levels: vec![Vec::new(); max_levels] }
    }

    pub fn level_bytes(&self, k: usize) -> u64 {
        self.levels[k].iter().map(|m| m.file_size).sum()
    }

    pub fn live_files(&self) -> impl Iterator<Item = &SstMeta> {
        self.levels.iter().flatten()
    }

    /// Apply `edit`, returning the successor version. Rejects edits that
    /// delete unknown files or break level disjointness.
    pub fn apply(&self, edit: &VersionEdit) -> Result<Version> {
        let mut levels = self.levels.clone();
        for (level, file_number) in &edit.deleted {
            let lvl = levels
                .get_mut(*level)
                .ok_or_else(|| Error::InvalidEdit(format!("delete from unknown level {level}")))?;
            let before = lvl.len();
            lvl.retain(|m| m.file_number != *file_number);
            if lvl.len() == before {
                return Err(Error::InvalidEdit(format!(
                    "file {file_number} not present in level {level}"
                )));
            }
        }
        for (level, meta) in &edit.added {
            let lvl = levels
                .get_mut(*level)
                .ok_or_else(|| Error::InvalidEdit(format!("add to unknown level {level}")))?;
            lvl.push(meta.clone());
        }
        for (k, lvl) in levels.iter_mut().enumerate() {
            if k == 0 {
                lvl.sort_by_key(|m| m.file_number);
            } else {
                lvl.sort_by(|a, b| a.range.min_key.cmp(&b.range.min_key));
                for w in lvl.windows(2) {
                    if w[0].range.max_key >= w[1].range.min_key {
                        return Err(Error::InvalidEdit(format!(
                            "level {k}: files {} and {} overlap",
                            w[0].file_number, w[1].file_number
                        )));
                    }
                }
            }
        }
        // No file may be referenced twice.
        let mut seen = std::collections::HashSet::new();
        for m in levels.iter().flatten() {
            if !seen.insert(m.file_number) {
                return Err(Error::InvalidEdit(format!(
                    "file {} referenced more than once",
                    m.file_number
                )));
            }
        }
        Ok(Version { levels })
    }
}

/// Delta between two versions plus the sequence watermark reached when the
/// edit was produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VersionEdit {
    pub deleted: Vec<(usize, u64)>,
    pub added: Vec<(usize, SstMeta)>,
    pub next_seq: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::KeyRange;

    fn meta(n: u64, lo: &str, hi: &str) -> SstMeta {
        SstMeta {
            file_number: n,
            file_size: 100,
            record_count: 1,
            range: KeyRange::new(lo.as_bytes().to_vec(), hi.as_bytes().to_vec()),
        }
    }

    #[test]
    fn empty_edit_is_identity() {
        let v = Version::new(3);
        let v2 = v.apply(&VersionEdit::default()).unwrap();
        assert_eq!(v2.levels.len(), 3);
        assert!(v2.levels.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn add_and_delete_change_counts() {
        let mut v = Version::new(3);
        for (i, (lo, hi)) in [("a", "c"), ("d", "f"), ("g", "i")].iter().enumerate() {
            v = v
                .apply(&VersionEdit {
                    deleted: vec![],
                    added: vec![(1, meta(i as u64 + 1, lo, hi))],
                    next_seq: 0,
                })
                .unwrap();
        }
        assert_eq!(v.levels[1].len(), 3);
        let v2 = v
            .apply(&VersionEdit {
                deleted: vec![(1, 1), (1, 2), (1, 3)],
                added: vec![(1, meta(10, "a", "e")), (1, meta(11, "f", "i"))],
                next_seq: 0,
            })
            .unwrap();
        assert_eq!(v2.levels[1].len(), 2);
    }

    #[test]
    fn overlapping_add_rejected() {
        let v = Version::new(3);
        let err = v
            .apply(&VersionEdit {
                deleted: vec![],
                added: vec![(1, meta(1, "a", "m")), (1, meta(2, "m", "z"))],
                next_seq: 0,
            })
            .unwrap_err();
        assert!(matches!(err, Error::InvalidEdit(_)));
    }

    #[test]
    fn delete_unknown_file_rejected() {
        let v = Version::new(3);
        let err = v
            .apply(&VersionEdit { deleted: vec![(1, 42)], added: vec![], next_seq: 0 })
            .unwrap_err();
        assert!(matches!(err, Error::InvalidEdit(_)));
    }

    #[test]
    fn l0_may_overlap() {
        let v = Version::new(3);
        let v2 = v
            .apply(&VersionEdit {
                deleted: vec![],
                added: vec![(0, meta(1, "a", "z")), (0, meta(2, "a", "z"))],
                next_seq: 0,
            })
            .unwrap();
        assert_eq!(v2.levels[0].len(), 2);
    }
}
