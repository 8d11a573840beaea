//! Bloom filters for retention bins.
//!
//! Bit positions use double hashing: `h_i(x) = (g1(x) + i * g2(x)) mod m`,
//! where `g1` and `g2` are two independent 64-bit mixes of `(seed, x)`.
//! When `m` is a power of two, `g2` is forced odd so the probe sequence has
//! full period.
//!
//! For `n` inserted keys the expected false-positive rate is
//!
//! ```text
//! FPR = (1 - (1 - 1/m)^(k n))^k
//! ```

use crate::error::{Error, Result};
use crate::rng::mix64;

/// Largest hash count accepted.
pub const MAX_HASHES: u32 = 64;

/// Default ceiling on filter size used by [`plan`].
pub const DEFAULT_PLAN_CEILING_BITS: u64 = 1 << 32;

const SNAPSHOT_MAGIC: &[u8; 5] = b"RBLM1";
const SNAPSHOT_HEADER_LEN: usize = 5 + 8 + 4 + 8 + 8;

const SEED_SALT_G1: u64 = 0x6a09_e667_f3bc_c908;
const SEED_SALT_G2: u64 = 0xbb67_ae85_84ca_a73b;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BloomParams {
    /// Number of bits.
    pub m: u64,
    /// Number of hash functions.
    pub k: u32,
    /// Hash-family seed.
    pub seed: u64,
}

impl BloomParams {
    pub fn new(m: u64, k: u32, seed: u64) -> Result<Self> {
        let params = Self { m, k, seed };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParams("bloom filter needs m >= 1 bits".into()));
        }
        if self.k == 0 || self.k > MAX_HASHES {
            return Err(Error::InvalidParams(format!(
                "bloom filter needs 1 <= k <= {MAX_HASHES}, got k = {}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Starting offset and stride of the probe sequence for `key`, both
    /// reduced mod `m`.
    #[inline]
    pub fn probe_start(&self, key: u64) -> (u64, u64) {
        let g1 = mix64(key ^ mix64(self.seed ^ SEED_SALT_G1));
        let g2 = mix64(key.rotate_left(29) ^ mix64(self.seed ^ SEED_SALT_G2));
        let start = g1 % self.m;
        let mut stride = g2 % self.m;
        if self.m.is_power_of_two() {
            stride |= 1;
        } else if stride == 0 {
            stride = 1;
        }
        (start, stride)
    }
}

/// Iterator over the `k` bit positions of one key.
#[derive(Debug, Clone)]
pub struct Probes {
    pos: u64,
    stride: u64,
    m: u64,
    remaining: u32,
}

impl Iterator for Probes {
    type Item = u64;

    #[inline]
    fn next(&mut self) -> Option<u64> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let current = self.pos;
        // pos + stride without overflowing when m is close to u64::MAX
        self.pos = if self.pos >= self.m - self.stride {
            self.pos - (self.m - self.stride)
        } else {
            self.pos + self.stride
        };
        Some(current)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    params: BloomParams,
    words: Vec<u64>,
    n_inserted: u64,
}

impl BloomFilter {
    pub fn new(params: BloomParams) -> Result<Self> {
        params.validate()?;
        let words = usize::try_from(params.m.div_ceil(64))
            .map_err(|_| Error::InvalidParams(format!("m = {} does not fit in memory", params.m)))?;
        Ok(Self {
            params,
            words: vec![0; words],
            n_inserted: 0,
        })
    }

    pub fn params(&self) -> &BloomParams {
        &self.params
    }

    pub fn n_inserted(&self) -> u64 {
        self.n_inserted
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn popcount(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn probes(&self, key: u64) -> Probes {
        let (pos, stride) = self.params.probe_start(key);
        Probes {
            pos,
            stride,
            m: self.params.m,
            remaining: self.params.k,
        }
    }

    #[inline]
    pub fn bit(&self, index: u64) -> bool {
        self.words[(index / 64) as usize] >> (index % 64) & 1 == 1
    }

    pub fn insert(&mut self, key: u64) {
        for index in self.probes(key) {
            self.words[(index / 64) as usize] |= 1 << (index % 64);
        }
        self.n_inserted += 1;
    }

    pub fn contains(&self, key: u64) -> bool {
        self.probes(key).all(|index| self.bit(index))
    }

    /// Expected false-positive rate at the current fill.
    pub fn expected_fpr(&self) -> f64 {
        fpr_analytic(&self.params, self.n_inserted)
    }

    /// Clears one bit. Only exists so fault-injection tests can break the
    /// no-false-negative guarantee on purpose.
    #[doc(hidden)]
    pub fn clear_bit_for_fault_injection(&mut self, index: u64) {
        self.words[(index / 64) as usize] &= !(1 << (index % 64));
    }

    /// Serialize to the `RBLM1` snapshot format: magic, then `m` (u64),
    /// `k` (u32), `seed` (u64), `n_inserted` (u64), then `ceil(m/64)` words,
    /// all little-endian. Bit `i` lives in word `i / 64` at position `i % 64`.
    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SNAPSHOT_HEADER_LEN + self.words.len() * 8);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&self.params.m.to_le_bytes());
        out.extend_from_slice(&self.params.k.to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out.extend_from_slice(&self.n_inserted.to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < SNAPSHOT_HEADER_LEN {
            return Err(Error::Snapshot(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..5] != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let m = u64_at(5);
        let k = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
        let seed = u64_at(17);
        let n_inserted = u64_at(25);
        let params = BloomParams::new(m, k, seed).map_err(|e| Error::Snapshot(e.to_string()))?;
        let n_words = m.div_ceil(64);
        let body = &bytes[SNAPSHOT_HEADER_LEN..];
        if body.len() as u64 != n_words * 8 {
            return Err(Error::Snapshot(format!(
                "expected {} words of bit data, found {} bytes",
                n_words,
                body.len()
            )));
        }
        let words: Vec<u64> = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tail_bits = m % 64;
        if tail_bits != 0 && words[words.len() - 1] >> tail_bits != 0 {
            return Err(Error::Snapshot("bits set beyond m".into()));
        }
        Ok(Self {
            params,
            words,
            n_inserted,
        })
    }
}

/// `(1 - (1 - 1/m)^(k n))^k`, and exactly 0 for an empty filter.
pub fn fpr_analytic(params: &BloomParams, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let m = params.m as f64;
    let k = f64::from(params.k);
    let exponent = k * n as f64;
    // (1 - 1/m)^(kn) computed in log space; m = 1 gives ln(0) = -inf -> 0.
    let miss = (exponent * (-1.0 / m).ln_1p()).exp();
    (1.0 - miss).powf(k).clamp(0.0, 1.0)
}

/// `round(m/n * ln 2)`, at least 1 and at most [`MAX_HASHES`].
pub fn optimal_k(m: u64, n: u64) -> u32 {
    let k = (m as f64 / n.max(1) as f64 * std::f64::consts::LN_2).round();
    (k as u32).clamp(1, MAX_HASHES)
}

/// Smallest filter meeting `target_fpr` for `n_expected` keys, with
/// `k = optimal_k(m, n)`. Seed is 0; use [`BloomParams::with_seed`].
pub fn plan(target_fpr: f64, n_expected: u64) -> Result<BloomParams> {
    plan_with_ceiling(target_fpr, n_expected, DEFAULT_PLAN_CEILING_BITS)
}

pub fn plan_with_ceiling(target_fpr: f64, n_expected: u64, ceiling_bits: u64) -> Result<BloomParams> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidParams(format!(
            "target FPR must lie in (0, 1), got {target_fpr}"
        )));
    }
    if n_expected == 0 {
        return Err(Error::InvalidParams("n_expected must be positive".into()));
    }
    let meets = |m: u64| {
        let params = BloomParams {
            m,
            k: optimal_k(m, n_expected),
            seed: 0,
        };
        fpr_analytic(&params, n_expected) <= target_fpr
    };

    // Exact FPR strictly exceeds (1 - e^{-kn/m})^k, whose minimum over real k
    // is exp(-(m/n) ln^2 2); no m below this bound can meet the target.
    let lower = (-(n_expected as f64) * target_fpr.ln() / (std::f64::consts::LN_2.powi(2))).floor();
    let mut m = (lower as u64).max(1);
    if m > ceiling_bits {
        return Err(Error::Unsatisfiable(format!(
            "FPR {target_fpr} for {n_expected} keys needs more than {ceiling_bits} bits"
        )));
    }

    const LINEAR_STEPS: u64 = 1 << 20;
    let scan_end = m.saturating_add(LINEAR_STEPS).min(ceiling_bits);
    while m <= scan_end {
        if meets(m) {
            return Ok(BloomParams {
                m,
                k: optimal_k(m, n_expected),
                seed: 0,
            });
        }
        m += 1;
    }

    // Only reachable when k hits MAX_HASHES; gallop, then bisect.
    let mut lo = scan_end;
    let mut hi = scan_end;
    while !meets(hi) {
        if hi >= ceiling_bits {
            return Err(Error::Unsatisfiable(format!(
                "FPR {target_fpr} for {n_expected} keys needs more than {ceiling_bits} bits"
            )));
        }
        lo = hi;
        hi = hi.saturating_mul(2).min(ceiling_bits);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if meets(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BloomParams {
        m: hi,
        k: optimal_k(hi, n_expected),
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn filter(m: u64, k: u32, seed: u64) -> BloomFilter {
        BloomFilter::new(BloomParams::new(m, k, seed).unwrap()).unwrap()
    }

    #[test]
    fn new_filter_is_empty() {
        let f = filter(64, 2, 7);
        assert_eq!(f.popcount(), 0);
        assert_eq!(f.n_inserted(), 0);
        assert_eq!(f.words().len(), 1);
    }

    #[test]
    fn rejects_degenerate_params() {
        assert!(matches!(BloomParams::new(0, 2, 7), Err(Error::InvalidParams(_))));
        assert!(matches!(BloomParams::new(8, 0, 7), Err(Error::InvalidParams(_))));
        assert!(matches!(BloomParams::new(8, 65, 7), Err(Error::InvalidParams(_))));
        assert!(BloomParams::new(1, 1, 0).is_ok());
    }

    #[test]
    fn one_bit_filter_works() {
        let mut f = filter(1, 1, 0);
        assert!(!f.contains(5));
        f.insert(3);
        assert!(f.contains(3));
        assert!(f.contains(5));
    }

    #[test]
    fn insert_twice_is_idempotent_on_bits() {
        let mut once = filter(256, 4, 1);
        let mut twice = filter(256, 4, 1);
        once.insert(99);
        twice.insert(99);
        twice.insert(99);
        assert_eq!(once.words(), twice.words());
        assert_eq!(twice.n_inserted(), 2);
    }

    #[test]
    fn single_insert_sets_at_most_k_bits() {
        for key in 0..1000 {
            let mut f = filter(8, 8, 3);
            f.insert(key);
            assert!(f.popcount() <= 8);
            assert!(f.popcount() >= 1);
        }
    }

    #[test]
    fn power_of_two_stride_is_odd() {
        let params = BloomParams::new(1024, 4, 11).unwrap();
        for key in 0..10_000 {
            let (start, stride) = params.probe_start(key);
            assert!(start < 1024);
            assert_eq!(stride % 2, 1);
        }
    }

    #[test]
    fn probes_are_distinct_for_power_of_two_m() {
        let f = filter(64, 32, 5);
        for key in 0..500 {
            let mut seen: Vec<u64> = f.probes(key).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 32);
        }
    }

    #[test]
    fn huge_m_does_not_overflow_probe_arithmetic() {
        let params = BloomParams::new(u64::MAX - 3, 8, 1).unwrap();
        let probes = Probes {
            pos: u64::MAX - 5,
            stride: u64::MAX - 10,
            m: params.m,
            remaining: 4,
        };
        for p in probes {
            assert!(p < params.m);
        }
    }

    #[test]
    fn analytic_fpr_edge_cases() {
        let p = BloomParams::new(1024, 4, 0).unwrap();
        assert_eq!(fpr_analytic(&p, 0), 0.0);
        let one = BloomParams::new(1, 1, 0).unwrap();
        assert_eq!(fpr_analytic(&one, 1), 1.0);
    }

    #[test]
    fn analytic_fpr_matches_direct_formula() {
        let p = BloomParams::new(1024, 4, 0).unwrap();
        let direct = (1.0 - (1.0 - 1.0 / 1024.0f64).powi(400)).powi(4);
        assert!((fpr_analytic(&p, 100) - direct).abs() < 1e-12);
    }

    #[test]
    fn plan_loose_target_gives_tiny_filter() {
        let p = plan(1.0 - 1e-9, 1).unwrap();
        assert!(p.m <= 2);
        assert_eq!(p.k, 1);
    }

    #[test]
    fn plan_rejects_bad_targets() {
        assert!(plan(0.0, 10).is_err());
        assert!(plan(1.0, 10).is_err());
        assert!(plan(0.1, 0).is_err());
        assert!(matches!(
            plan_with_ceiling(1e-6, 1_000_000, 1000),
            Err(Error::Unsatisfiable(_))
        ));
    }

    #[test]
    fn plan_one_percent_thousand_keys() {
        let n = 1000;
        let p = plan(0.01, n).unwrap();
        // closed form m = ceil(-n ln p / ln^2 2) = 9586
        let closed = (-(n as f64) * 0.01f64.ln() / std::f64::consts::LN_2.powi(2)).ceil();
        assert_eq!(closed, 9586.0);
        assert!((p.m as f64 - closed).abs() <= 0.1 * closed, "m = {}", p.m);
        assert_eq!(p.k, 7);
        assert!(fpr_analytic(&p, n) <= 0.01);
        let smaller = BloomParams {
            m: p.m - 1,
            k: optimal_k(p.m - 1, n),
            seed: 0,
        };
        assert!(fpr_analytic(&smaller, n) > 0.01);
    }

    #[test]
    fn plan_half_target_matches_exhaustive_scan() {
        let p = plan(0.5, 1).unwrap();
        let brute = (1..=64u64)
            .find(|&m| {
                let q = BloomParams {
                    m,
                    k: optimal_k(m, 1),
                    seed: 0,
                };
                fpr_analytic(&q, 1) <= 0.5
            })
            .unwrap();
        assert_eq!(p.m, brute);
        assert!(fpr_analytic(&p, 1) <= 0.5);
    }

    #[test]
    fn plan_matches_exhaustive_scan_on_small_cases() {
        for &n in &[1u64, 3, 10, 40] {
            for &target in &[0.3, 0.1, 0.05, 0.01] {
                let p = plan(target, n).unwrap();
                let brute = (1..=10_000u64)
                    .find(|&m| {
                        let q = BloomParams {
                            m,
                            k: optimal_k(m, n),
                            seed: 0,
                        };
                        fpr_analytic(&q, n) <= target
                    })
                    .unwrap();
                assert_eq!(p.m, brute, "n = {n}, target = {target}");
            }
        }
    }

    #[test]
    fn snapshot_round_trip_and_layout() {
        let mut f = filter(130, 3, 77);
        for key in [1u64, 2, 3, 1000, u64::MAX] {
            f.insert(key);
        }
        let bytes = f.to_snapshot();
        assert_eq!(&bytes[..5], b"RBLM1");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 130);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 77);
        assert_eq!(u64::from_le_bytes(bytes[25..33].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 33 + 3 * 8);
        for i in 0..130u64 {
            let word = u64::from_le_bytes(bytes[33 + (i / 64) as usize * 8..][..8].try_into().unwrap());
            assert_eq!(word >> (i % 64) & 1 == 1, f.bit(i));
        }
        assert_eq!(BloomFilter::from_snapshot(&bytes).unwrap(), f);
    }

    #[test]
    fn snapshot_rejects_garbage() {
        let f = filter(64, 2, 1);
        let mut bytes = f.to_snapshot();
        assert!(BloomFilter::from_snapshot(&bytes[..10]).is_err());
        bytes[0] = b'X';
        assert!(BloomFilter::from_snapshot(&bytes).is_err());
        let mut short = f.to_snapshot();
        short.pop();
        assert!(BloomFilter::from_snapshot(&short).is_err());
        let mut stray = filter(10, 2, 1).to_snapshot();
        stray[33 + 1] = 0xff;
        assert!(BloomFilter::from_snapshot(&stray).is_err());
    }

    proptest! {
        #[test]
        fn no_false_negatives(keys in proptest::collection::vec(any::<u64>(), 1..200),
                              m in 1u64..4096, k in 1u32..16, seed in any::<u64>()) {
            let mut f = filter(m, k, seed);
            for &key in &keys {
                f.insert(key);
            }
            for &key in &keys {
                prop_assert!(f.contains(key));
            }
            prop_assert!(f.popcount() <= (k as u64 * keys.len() as u64).min(m));
        }

        #[test]
        fn inserting_never_clears_bits(keys in proptest::collection::vec(any::<u64>(), 1..100),
                                       seed in any::<u64>()) {
            let mut f = filter(512, 5, seed);
            for &key in &keys {
                let before = f.words().to_vec();
                f.insert(key);
                for (b, a) in before.iter().zip(f.words()) {
                    prop_assert_eq!(b & a, *b);
                }
            }
        }

        #[test]
        fn same_inserts_same_bits(keys in proptest::collection::vec(any::<u64>(), 0..100),
                                  seed in any::<u64>()) {
            let mut a = filter(777, 6, seed);
            let mut b = filter(777, 6, seed);
            keys.iter().for_each(|&x| a.insert(x));
            keys.iter().for_each(|&x| b.insert(x));
            prop_assert_eq!(a.to_snapshot(), b.to_snapshot());
        }
    }
}
