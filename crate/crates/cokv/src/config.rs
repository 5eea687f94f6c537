use std::time::Duration;

/// Which compaction path the store runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Single-host leveled compaction.
    Baseline,
    /// Collaborative compaction: eligible tasks are split between the host
    /// and the device process.
    Cokv,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Baseline => write!(f, "baseline"),
            Mode::Cokv => write!(f, "cokv"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "cokv" => Ok(Mode::Cokv),
            other => Err(format!("unknown mode {other:?} (expected baseline|cokv)")),
        }
    }
}

/// Store tuning knobs. Defaults follow the common LevelDB configuration:
/// 4MB memtable, 2MB tables, 4KB blocks, L0 trigger of 4 files, 10MB L1
/// budget growing 10x per level.
#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub mode: Mode,
    pub memtable_capacity: usize,
    pub sstable_target_size: u64,
    pub block_size: usize,
    pub l0_trigger: usize,
    pub l1_budget: u64,
    pub growth_factor: u64,
    pub max_levels: usize,
    /// Endpoint of the device process (host:port); required in cokv mode.
    pub device_endpoint: Option<String>,
    pub device_timeout: Duration,
    /// Size of the file-number block pre-allocated to the device per request.
    pub file_number_block: u32,
    /// fsync SSTables and manifest appends.
    pub sync_files: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            mode: Mode::Baseline,
            memtable_capacity: 4 << 20,
            sstable_target_size: 2 << 20,
            block_size: 4 << 10,
            l0_trigger: 4,
            l1_budget: 10 << 20,
            growth_factor: 10,
            max_levels: 7,
            device_endpoint: None,
            device_timeout: Duration::from_secs(60),
            file_number_block: 64,
            sync_files: true,
        }
    }
}

impl StoreConfig {
    /// Byte budget of level k (k >= 1). L0 is file-count triggered.
    pub fn level_budget(&self, k: usize) -> u64 {
        debug_assert!(k >= 1);
        self.l1_budget.saturating_mul(self.growth_factor.saturating_pow(k as u32 - 1))
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.memtable_capacity == 0 || self.sstable_target_size == 0 || self.block_size == 0 {
            return Err(crate::Error::Config("sizes must be non-zero".into()));
        }
        if self.max_levels < 2 {
            return Err(crate::Error::Config("need at least 2 levels".into()));
        }
        if self.mode == Mode::Cokv && self.device_endpoint.is_none() {
            return Err(crate::Error::Config("cokv mode requires a device endpoint".into()));
        }
        Ok(())
    }
}
