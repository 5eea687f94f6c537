//! In-memory write buffer. Keeps only the newest version per user key;
//! older versions are fully shadowed because the whole buffer flushes as
//! one unit. Size is tracked in flushed-encoding bytes so a sealed
//! memtable maps directly onto output file sizes.

use std::collections::BTreeMap;

use crate::types::{InternalRecord, RecordKind};

#[derive(Debug, Default)]
pub struct MemTable {
    map: BTreeMap<Vec<u8>, (u64, RecordKind, Vec<u8>)>,
    approx_bytes: usize,
    max_seq: u64,
}

impl MemTable {
    pub fn new() -> MemTable {
        MemTable::default()
    }

    pub fn insert(&mut self, rec: InternalRecord) {
        self.max_seq = self.max_seq.max(rec.seq);
        let added = rec.encoded_len();
        match self.map.get(&rec.user_key) {
            Some((seq, _, _)) if *seq > rec.seq => return, // stale replay
            Some((_, _, old_value)) => {
                let removed = rec.encoded_len() - rec.value.len() + old_value.len();
                self.approx_bytes = self.approx_bytes.saturating_sub(removed) + added;
            }
            None => self.approx_bytes += added,
        }
        self.map.insert(rec.user_key, (rec.seq, rec.kind, rec.value));
    }

    pub fn get(&self, key: &[u8]) -> Option<(u64, RecordKind, &[u8])> {
        self.map.get(key).map(|(seq, kind, v)| (*seq, *kind, v.as_slice()))
    }

    pub fn approx_bytes(&self) -> usize {
        self.approx_bytes
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn max_seq(&self) -> u64 {
        self.max_seq
    }

    /// Records in internal order (one version per key).
    pub fn records(&self) -> impl Iterator<Item = InternalRecord> + '_ {
        self.map.iter().map(|(k, (seq, kind, v))| InternalRecord {
            user_key: k.clone(),
            seq: *seq,
            kind: *kind,
            value: v.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newest_version_wins() {
        let mut m = MemTable::new();
        m.insert(InternalRecord::put(b"a".to_vec(), 1, b"one".to_vec()));
        m.insert(InternalRecord::put(b"a".to_vec(), 2, b"two".to_vec()));
        assert_eq!(m.get(b"a").unwrap().2, b"two");
        assert_eq!(m.len(), 1);
        // stale seq (replay) is ignored
        m.insert(InternalRecord::put(b"a".to_vec(), 1, b"one".to_vec()));
        assert_eq!(m.get(b"a").unwrap().2, b"two");
    }

    #[test]
    fn tombstones_are_versions_too() {
        let mut m = MemTable::new();
        m.insert(InternalRecord::put(b"a".to_vec(), 1, b"one".to_vec()));
        m.insert(InternalRecord::delete(b"a".to_vec(), 2));
        let (seq, kind, _) = m.get(b"a").unwrap();
        assert_eq!(seq, 2);
        assert_eq!(kind, RecordKind::Delete);
    }

    #[test]
    fn size_tracks_replacements() {
        let mut m = MemTable::new();
        m.insert(InternalRecord::put(b"a".to_vec(), 1, vec![0u8; 100]));
        let s1 = m.approx_bytes();
        m.insert(InternalRecord::put(b"a".to_vec(), 2, vec![0u8; 10]));
        assert!(m.approx_bytes() < s1);
    }
}
