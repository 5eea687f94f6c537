//! db_bench-style and YCSB-style operation streams. Everything is driven
//! by a seeded RNG: the same spec and seed always produce the identical
//! stream, which is what makes paired-mode comparisons meaningful.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Zipf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    Fillseq,
    Fillrandom,
    Ycsb,
}

impl std::str::FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fillseq" => Ok(WorkloadKind::Fillseq),
            "fillrandom" => Ok(WorkloadKind::Fillrandom),
            "ycsb" => Ok(WorkloadKind::Ycsb),
            other => Err(format!("unknown workload {other:?} (fillseq|fillrandom|ycsb)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub num_ops: u64,
    pub key_size: usize,
    pub value_size: usize,
    /// YCSB run phase: probability an op is a read.
    pub read_ratio: f64,
    pub zipf_theta: f64,
    /// YCSB load phase volume, counted in value bytes.
    pub load_bytes: u64,
    /// YCSB run phase volume, counted in value bytes per issued op.
    pub run_bytes: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Fillrandom,
            num_ops: 1_000_000,
            key_size: 16,
            value_size: 100,
            read_ratio: 0.0,
            zipf_theta: 0.99,
            load_bytes: 0,
            run_bytes: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Put(Vec<u8>, Vec<u8>),
    Get(Vec<u8>),
    Delete(Vec<u8>),
}

/// Zero-padded decimal key of fixed width; the last `width` digits are
/// kept when the number outgrows the width.
fn format_key(i: u64, width: usize) -> Vec<u8> {
    let s = format!("{i:0width$}");
    s[s.len().saturating_sub(width)..].as_bytes().to_vec()
}

fn random_value(rng: &mut ChaCha12Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill(v.as_mut_slice());
    v
}

/// Draw a rank in `[0, n)` with P(rank i) proportional to 1/(i+1)^theta.
pub fn zipf_sample(n: u64, theta: f64, rng: &mut impl Rng) -> u64 {
    debug_assert!(n >= 1);
    let dist = Zipf::new(n, theta).expect("valid zipf parameters");
    dist.sample(rng) as u64 - 1
}

/// Materialize the operation stream for `spec`.
pub fn gen_operations(spec: &WorkloadSpec) -> OpStream {
    let rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let phase = match spec.kind {
        WorkloadKind::Fillseq => Phase::Fillseq { next: 0, remaining: spec.num_ops },
        WorkloadKind::Fillrandom => Phase::Fillrandom { remaining: spec.num_ops },
        WorkloadKind::Ycsb => {
            let record_count = (spec.load_bytes / spec.value_size as u64).max(1);
            let run_ops = spec.run_bytes / spec.value_size as u64;
            Phase::YcsbLoad { next: 0, record_count, run_ops }
        }
    };
    OpStream { spec: spec.clone(), rng, phase }
}

enum Phase {
    Fillseq { next: u64, remaining: u64 },
    Fillrandom { remaining: u64 },
    YcsbLoad { next: u64, record_count: u64, run_ops: u64 },
    YcsbRun { record_count: u64, remaining: u64 },
    Done,
}

pub struct OpStream {
    spec: WorkloadSpec,
    rng: ChaCha12Rng,
    phase: Phase,
}

impl Iterator for OpStream {
    type Item = Op;

    fn next(&mut self) -> Option<Op> {
        let spec = &self.spec;
        match &mut self.phase {
            Phase::Fillseq { next, remaining } => {
                if *remaining == 0 {
                    self.phase = Phase::Done;
                    return None;
                }
                *remaining -= 1;
                let key = format_key(*next, spec.key_size);
                *next += 1;
                Some(Op::Put(key, random_value(&mut self.rng, spec.value_size)))
            }
            Phase::Fillrandom { remaining } => {
                if *remaining == 0 {
                    self.phase = Phase::Done;
                    return None;
                }
                *remaining -= 1;
                let i = self.rng.gen_range(0..spec.num_ops.max(1));
                Some(Op::Put(
                    format_key(i, spec.key_size),
                    random_value(&mut self.rng, spec.value_size),
                ))
            }
            Phase::YcsbLoad { next, record_count, run_ops } => {
                if *next >= *record_count {
                    self.phase =
                        Phase::YcsbRun { record_count: *record_count, remaining: *run_ops };
                    return self.next();
                }
                let key = format_key(*next, spec.key_size);
                *next += 1;
                Some(Op::Put(key, random_value(&mut self.rng, spec.value_size)))
            }
            Phase::YcsbRun { record_count, remaining } => {
                if *remaining == 0 {
                    self.phase = Phase::Done;
                    return None;
                }
                *remaining -= 1;
                let rank = zipf_sample(*record_count, spec.zipf_theta, &mut self.rng);
                let key = format_key(rank, spec.key_size);
                if self.rng.gen_bool(spec.read_ratio) {
                    Some(Op::Get(key))
                } else {
                    Some(Op::Put(key, random_value(&mut self.rng, spec.value_size)))
                }
            }
            Phase::Done => None,
        }
    }
}

/// Seeded put/delete mix over a bounded keyspace, used by verification
/// runs: roughly one delete per five puts.
pub fn gen_verify_ops(seed: u64, num_ops: u64) -> Vec<Op> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let keyspace = (num_ops / 4).max(16);
    (0..num_ops)
        .map(|_| {
            let key = format_key(rng.gen_range(0..keyspace), 16);
            if rng.gen_bool(0.2) {
                Op::Delete(key)
            } else {
                let len = rng.gen_range(20..140);
                Op::Put(key, random_value(&mut rng, len))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fillseq_keys_are_padded_ascending() {
        let spec = WorkloadSpec {
            kind: WorkloadKind::Fillseq,
            num_ops: 3,
            key_size: 4,
            ..WorkloadSpec::default()
        };
        let keys: Vec<Vec<u8>> = gen_operations(&spec)
            .map(|op| match op {
                Op::Put(k, _) => k,
                _ => panic!("fillseq emits puts only"),
            })
            .collect();
        assert_eq!(keys, vec![b"0000".to_vec(), b"0001".to_vec(), b"0002".to_vec()]);
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = WorkloadSpec {
            kind: WorkloadKind::Ycsb,
            load_bytes: 10_000,
            run_bytes: 20_000,
            value_size: 100,
            read_ratio: 0.5,
            seed: 99,
            ..WorkloadSpec::default()
        };
        let a: Vec<Op> = gen_operations(&spec).collect();
        let b: Vec<Op> = gen_operations(&spec).collect();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn ycsb_read_fraction_binomial() {
        let spec = WorkloadSpec {
            kind: WorkloadKind::Ycsb,
            load_bytes: 1_000,
            run_bytes: 10_000_000,
            value_size: 100,
            read_ratio: 0.9,
            seed: 5,
            ..WorkloadSpec::default()
        };
        let mut reads = 0u64;
        let mut total = 0u64;
        for op in gen_operations(&spec).skip(10) {
            // skip the 10 load ops
            total += 1;
            if matches!(op, Op::Get(_)) {
                reads += 1;
            }
        }
        assert_eq!(total, 100_000);
        let frac = reads as f64 / total as f64;
        assert!((frac - 0.9).abs() < 0.005, "read fraction {frac}");
    }

    /// Empirical zipf frequencies against the analytic harmonic sum.
    #[test]
    fn zipf_matches_analytic_distribution() {
        let n = 10u64;
        let theta = 0.99;
        let mut rng = ChaCha12Rng::seed_from_u64(424242);
        let draws = 1_000_000usize;
        let mut counts = vec![0u64; n as usize];
        for _ in 0..draws {
            counts[zipf_sample(n, theta, &mut rng) as usize] += 1;
        }
        let h: f64 = (1..=n).map(|i| 1.0 / (i as f64).powf(theta)).sum();
        for (i, c) in counts.iter().enumerate() {
            let analytic = 1.0 / ((i + 1) as f64).powf(theta) / h;
            let empirical = *c as f64 / draws as f64;
            let rel = (empirical - analytic).abs() / analytic;
            assert!(rel < 0.01, "rank {i}: empirical {empirical}, analytic {analytic}");
        }
    }

    #[test]
    fn zipf_n1_always_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(zipf_sample(1, 0.99, &mut rng), 0);
        }
    }

    /// As theta approaches zero the distribution flattens toward uniform.
    #[test]
    fn zipf_low_theta_near_uniform() {
        let n = 8u64;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let draws = 200_000usize;
        let mut counts = vec![0u64; n as usize];
        for _ in 0..draws {
            counts[zipf_sample(n, 0.01, &mut rng) as usize] += 1;
        }
        let expected = draws as f64 / n as f64;
        for c in &counts {
            let rel = (*c as f64 - expected).abs() / expected;
            assert!(rel < 0.05, "count {c} vs uniform {expected}");
        }
    }
}
