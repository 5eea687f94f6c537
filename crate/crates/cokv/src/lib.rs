//! A leveled LSM-tree key-value store with two compaction modes: classic
//! single-host compaction, and collaborative compaction where each
//! eligible compaction is split between the host and a near-data
//! processing device emulated as a separate process. The crate also ships
//! a benchmark harness measuring write amplification, throughput, and
//! latency under db_bench- and YCSB-style workloads.

pub mod bench;
pub mod compaction;
pub mod config;
pub mod device;
pub mod error;
pub mod manifest;
pub mod memtable;
pub mod merge;
pub mod metrics;
pub mod offload;
pub mod protocol;
pub mod session;
pub mod sstable;
pub mod store;
pub mod types;
pub mod version;
pub mod wal;

pub use config::{Mode, StoreConfig};
pub use error::{Error, ProtocolError, Result};
pub use store::Store;
pub use types::{InternalRecord, KeyFilter, KeyRange, RecordKind, SstMeta};
