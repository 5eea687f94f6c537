use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Kind of a logged record. A delete is a tombstone that shadows older
/// values until it can be dropped at the bottom level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Put = 0,
    Delete = 1,
}

impl RecordKind {
    pub fn from_u8(v: u8) -> Option<RecordKind> {
        match v {
            0 => Some(RecordKind::Put),
            1 => Some(RecordKind::Delete),
            _ => None,
        }
    }
}

/// A user key tagged with its sequence number and kind; the unit of merge.
///
/// Internal order is (user_key ascending, seq descending) so that the newest
/// version of a key sorts first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InternalRecord {
    pub user_key: Vec<u8>,
    pub seq: u64,
    pub kind: RecordKind,
    pub value: Vec<u8>,
}

impl InternalRecord {
    pub fn put(key: impl Into<Vec<u8>>, seq: u64, value: impl Into<Vec<u8>>) -> Self {
        InternalRecord { user_key: key.into(), seq, kind: RecordKind::Put, value: value.into() }
    }

    pub fn delete(key: impl Into<Vec<u8>>, seq: u64) -> Self {
        InternalRecord { user_key: key.into(), seq, kind: RecordKind::Delete, value: Vec::new() }
    }

    /// (user_key ascending, seq descending).
    pub fn internal_cmp(&self, other: &InternalRecord) -> Ordering {
        self.user_key
            .cmp(&other.user_key)
            .then_with(|| other.seq.cmp(&self.seq))
    }

    /// Bytes this record occupies in a data block.
    pub fn encoded_len(&self) -> usize {
        2 + 4 + 8 + 1 + self.user_key.len() + self.value.len()
    }
}

/// Closed interval over user keys in lexicographic byte order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRange {
    pub min_key: Vec<u8>,
    pub max_key: Vec<u8>,
}

impl KeyRange {
    pub fn new(min_key: impl Into<Vec<u8>>, max_key: impl Into<Vec<u8>>) -> Self {
        let r = KeyRange { min_key: min_key.into(), max_key: max_key.into() };
        debug_assert!(r.min_key <= r.max_key);
        r
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.min_key.as_slice() <= key && key <= self.max_key.as_slice()
    }

    /// Closed-interval overlap: shared endpoints count.
    pub fn overlaps(&self, other: &KeyRange) -> bool {
        self.min_key <= other.max_key && other.min_key <= self.max_key
    }

    /// Smallest range covering both.
    pub fn union(&self, other: &KeyRange) -> KeyRange {
        KeyRange {
            min_key: self.min_key.clone().min(other.min_key.clone()),
            max_key: self.max_key.clone().max(other.max_key.clone()),
        }
    }
}

/// Per-file metadata tracked by the version: file number, size, key range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SstMeta {
    pub file_number: u64,
    pub file_size: u64,
    pub record_count: u64,
    pub range: KeyRange,
}

impl SstMeta {
    pub fn file_name(file_number: u64) -> String {
        format!("{file_number:06}.sst")
    }

    pub fn path_in(&self, dir: &std::path::Path) -> std::path::PathBuf {
        dir.join(Self::file_name(self.file_number))
    }
}

/// Half-open interval `[lo, hi)` over user keys; `None` bounds are unbounded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyFilter {
    pub lo: Option<Vec<u8>>,
    pub hi: Option<Vec<u8>>,
}

impl KeyFilter {
    pub fn all() -> KeyFilter {
        KeyFilter::default()
    }

    pub fn below(hi: impl Into<Vec<u8>>) -> KeyFilter {
        KeyFilter { lo: None, hi: Some(hi.into()) }
    }

    pub fn at_or_above(lo: impl Into<Vec<u8>>) -> KeyFilter {
        KeyFilter { lo: Some(lo.into()), hi: None }
    }

    pub fn range(lo: impl Into<Vec<u8>>, hi: impl Into<Vec<u8>>) -> KeyFilter {
        KeyFilter { lo: Some(lo.into()), hi: Some(hi.into()) }
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        if let Some(lo) = &self.lo {
            if key < lo.as_slice() {
                return false;
            }
        }
        if let Some(hi) = &self.hi {
            if key >= hi.as_slice() {
                return false;
            }
        }
        true
    }

    pub fn is_unbounded(&self) -> bool {
        self.lo.is_none() && self.hi.is_none()
    }
}
