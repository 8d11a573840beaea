//! Multi-rate refresh controller.
//!
//! Rows are grouped into retention bins. Bin `i < thresholds.len()` holds
//! rows with profiled retention in `[t_{i-1}, t_i)` (with `t_{-1}` the base
//! interval) and is refreshed every `t_{i-1}` ms; rows at or above the last
//! threshold fall in the implicit default bin, refreshed every `t_last` ms.
//! Only the non-default bins are stored, each in its own Bloom filter.
//!
//! Lookups probe the filters shortest-interval first, so a false positive
//! can only move a row to a faster refresh rate.

use std::fmt::Write as _;

use crate::bloom::{self, BloomFilter, BloomParams};
use crate::error::{Error, Result};
use crate::profiler::RetentionProfile;
use crate::retention::DeviceConfig;
use crate::rng::split_seed;

/// Upper bound on non-default bins (bin indices are stored as `u8`).
pub const MAX_FILTERS: usize = 254;

#[derive(Debug, Clone, PartialEq)]
pub struct BinConfig {
    /// Strictly increasing bin edges, each a multiple of the base interval.
    pub thresholds_ms: Vec<f64>,
    pub base_interval_ms: f64,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            thresholds_ms: vec![128.0, 256.0],
            base_interval_ms: 64.0,
        }
    }
}

impl BinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_interval_ms > 0.0 && self.base_interval_ms.is_finite()) {
            return Err(Error::config("bins.base_interval_ms", "must be positive"));
        }
        if self.thresholds_ms.is_empty() {
            return Err(Error::config("bins.thresholds_ms", "need at least one threshold"));
        }
        if self.thresholds_ms.len() > MAX_FILTERS {
            return Err(Error::config(
                "bins.thresholds_ms",
                format!("at most {MAX_FILTERS} thresholds"),
            ));
        }
        if self.thresholds_ms[0] < self.base_interval_ms {
            return Err(Error::config(
                "bins.thresholds_ms",
                "first threshold is below the base interval",
            ));
        }
        for pair in self.thresholds_ms.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::config(
                    "bins.thresholds_ms",
                    "thresholds must be strictly increasing",
                ));
            }
        }
        for &t in &self.thresholds_ms {
            let ratio = t / self.base_interval_ms;
            if !t.is_finite() || (ratio - ratio.round()).abs() > 1e-9 * ratio {
                return Err(Error::config(
                    "bins.thresholds_ms",
                    format!(
                        "{t} ms is not a multiple of the {} ms base interval",
                        self.base_interval_ms
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn num_filters(&self) -> usize {
        self.thresholds_ms.len()
    }

    /// Index of the implicit default bin.
    pub fn default_bin(&self) -> usize {
        self.thresholds_ms.len()
    }

    pub fn default_interval_ms(&self) -> f64 {
        self.thresholds_ms[self.thresholds_ms.len() - 1]
    }

    /// Refresh interval of `bin`, equal to the lower edge of its range.
    pub fn interval_ms(&self, bin: usize) -> f64 {
        if bin == 0 {
            self.base_interval_ms
        } else {
            self.thresholds_ms[bin - 1]
        }
    }

    /// Interval in base windows.
    pub fn multiplier(&self, bin: usize) -> u64 {
        (self.interval_ms(bin) / self.base_interval_ms).round() as u64
    }

    pub fn multipliers(&self) -> Vec<u64> {
        (0..=self.default_bin()).map(|b| self.multiplier(b)).collect()
    }

    pub fn max_multiplier(&self) -> u64 {
        self.multiplier(self.default_bin())
    }

    /// Bin whose range contains `retention_ms`. Values below the base
    /// interval land in bin 0.
    pub fn bin_for(&self, retention_ms: f64) -> usize {
        self.thresholds_ms
            .iter()
            .position(|&t| retention_ms < t)
            .unwrap_or(self.default_bin())
    }

    /// Least common multiple of all multipliers.
    pub fn lcm_multiplier(&self) -> u64 {
        self.multipliers().into_iter().fold(1, |acc, m| acc / gcd(acc, m) * m)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterSizing {
    /// Size each filter with [`bloom::plan`] for its actual row count.
    TargetFpr(f64),
    /// Same size for every filter.
    Explicit { m: u64, k: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloomBudget {
    pub sizing: FilterSizing,
    /// Filter `i` is hashed with `split_seed(seed, i)`.
    pub seed: u64,
}

impl Default for BloomBudget {
    fn default() -> Self {
        Self {
            sizing: FilterSizing::TargetFpr(1e-3),
            seed: 0,
        }
    }
}

impl BloomBudget {
    pub fn validate(&self) -> Result<()> {
        match self.sizing {
            FilterSizing::TargetFpr(p) => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::config("bloom.target_fpr", "must lie in (0, 1)"));
                }
            }
            FilterSizing::Explicit { m, k } => {
                if m == 0 {
                    return Err(Error::config("bloom.m_bits", "filter needs at least one bit"));
                }
                if k == 0 || k > bloom::MAX_HASHES {
                    return Err(Error::config(
                        "bloom.k",
                        format!("must lie in 1..={}", bloom::MAX_HASHES),
                    ));
                }
            }
        }
        Ok(())
    }

    fn params_for(&self, bin: usize, rows: u64) -> Result<BloomParams> {
        let seed = split_seed(self.seed, bin as u64);
        match self.sizing {
            FilterSizing::TargetFpr(p) => Ok(bloom::plan(p, rows.max(1))?.with_seed(seed)),
            FilterSizing::Explicit { m, k } => BloomParams::new(m, k, seed),
        }
    }
}

/// Profiled bin of every row. Fails if a row's raw observed retention is
/// below the base interval, since no bin can refresh it often enough.
pub fn assign_bins(profile: &RetentionProfile, cfg: &BinConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    profile
        .observed_ms
        .iter()
        .zip(&profile.measured_ms)
        .enumerate()
        .map(|(row, (&observed, &measured))| {
            if observed < cfg.base_interval_ms {
                return Err(Error::UnbinnableRow {
                    row: row as u64,
                    observed_ms: observed,
                    base_ms: cfg.base_interval_ms,
                });
            }
            Ok(cfg.bin_for(measured) as u8)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinSet {
    config: BinConfig,
    filters: Vec<BloomFilter>,
    rows_inserted: Vec<u64>,
}

impl BinSet {
    /// Build from precomputed per-row bins (see [`assign_bins`]).
    pub fn from_assignment(assigned: &[u8], cfg: &BinConfig, budget: &BloomBudget) -> Result<Self> {
        cfg.validate()?;
        budget.validate()?;
        let mut rows_inserted = vec![0u64; cfg.default_bin() + 1];
        for &b in assigned {
            rows_inserted[b as usize] += 1;
        }
        let mut filters = (0..cfg.num_filters())
            .map(|bin| BloomFilter::new(budget.params_for(bin, rows_inserted[bin])?))
            .collect::<Result<Vec<_>>>()?;
        for (row, &b) in assigned.iter().enumerate() {
            if let Some(f) = filters.get_mut(b as usize) {
                f.insert(row as u64);
            }
        }
        Ok(Self {
            config: cfg.clone(),
            filters,
            rows_inserted,
        })
    }

    pub fn config(&self) -> &BinConfig {
        &self.config
    }

    pub fn filters(&self) -> &[BloomFilter] {
        &self.filters
    }

    #[doc(hidden)]
    pub fn filters_mut(&mut self) -> &mut [BloomFilter] {
        &mut self.filters
    }

    /// Rows placed in each bin by profiling, default bin last.
    pub fn rows_inserted(&self) -> &[u64] {
        &self.rows_inserted
    }

    /// Controller storage: total bits across all filters.
    pub fn storage_bits(&self) -> u64 {
        self.filters.iter().map(|f| f.params().m).sum()
    }

    /// First filter (shortest interval first) claiming `row`, else the
    /// default bin.
    pub fn query_bin(&self, row: u64) -> usize {
        self.filters
            .iter()
            .position(|f| f.contains(row))
            .unwrap_or(self.config.default_bin())
    }

    pub fn row_multiplier(&self, row: u64) -> u64 {
        self.config.multiplier(self.query_bin(row))
    }

    /// Rows per bin as seen through the filters, for rows `0..num_rows`.
    pub fn effective_counts(&self, num_rows: u64) -> Vec<u64> {
        let mut counts = vec![0u64; self.config.default_bin() + 1];
        for row in 0..num_rows {
            counts[self.query_bin(row)] += 1;
        }
        counts
    }

    /// Per-bin summary; `assigned` gives each row's profiled bin so the
    /// false-positive rate of each filter can be measured on rows it does
    /// not hold.
    pub fn summary(&self, assigned: &[u8]) -> Vec<BinSummaryRow> {
        let default_bin = self.config.default_bin();
        (0..=default_bin)
            .map(|bin| {
                let filter = self.filters.get(bin);
                let measured_fpr = filter.map(|f| {
                    let (mut probes, mut hits) = (0u64, 0u64);
                    for (row, &b) in assigned.iter().enumerate() {
                        if b as usize != bin {
                            probes += 1;
                            hits += f.contains(row as u64) as u64;
                        }
                    }
                    if probes == 0 {
                        0.0
                    } else {
                        hits as f64 / probes as f64
                    }
                });
                BinSummaryRow {
                    bin_index: bin,
                    interval_ms: self.config.interval_ms(bin),
                    rows_inserted: self.rows_inserted[bin],
                    filter_m_bits: filter.map_or(0, |f| f.params().m),
                    filter_k: filter.map_or(0, |f| f.params().k),
                    measured_fpr,
                }
            })
            .collect()
    }
}

/// Bin each row of `profile` and store the non-default bins in filters.
pub fn build_bins(profile: &RetentionProfile, cfg: &BinConfig, budget: &BloomBudget) -> Result<BinSet> {
    let assigned = assign_bins(profile, cfg)?;
    BinSet::from_assignment(&assigned, cfg, budget)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinSummaryRow {
    pub bin_index: usize,
    pub interval_ms: f64,
    pub rows_inserted: u64,
    pub filter_m_bits: u64,
    pub filter_k: u32,
    /// `None` for the default bin, which has no filter.
    pub measured_fpr: Option<f64>,
}

pub const BIN_SUMMARY_HEADER: &str = "bin_index,interval_ms,rows_inserted,filter_m_bits,filter_k,measured_fpr";

pub fn bin_summary_csv(rows: &[BinSummaryRow]) -> String {
    let mut out = format!("{BIN_SUMMARY_HEADER}\n");
    for r in rows {
        let fpr = r.measured_fpr.map(|f| f.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.bin_index, r.interval_ms, r.rows_inserted, r.filter_m_bits, r.filter_k, fpr
        );
    }
    out
}

/// Period counter plus per-bin multipliers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefreshSchedule {
    pub period_counter: u64,
    pub multipliers: Vec<u64>,
}

impl RefreshSchedule {
    pub fn new(cfg: &BinConfig) -> Self {
        Self {
            period_counter: 0,
            multipliers: cfg.multipliers(),
        }
    }

    /// Move to the next base window.
    pub fn advance(&mut self) {
        self.period_counter += 1;
    }

    #[inline]
    pub fn bin_due(&self, bin: usize) -> bool {
        self.period_counter.is_multiple_of(self.multipliers[bin])
    }
}

/// Whether `row` is refreshed in the schedule's current window.
pub fn should_refresh(bins: &BinSet, sched: &RefreshSchedule, row: u64) -> bool {
    sched.bin_due(bins.query_bin(row))
}

/// Multiples of `multiplier` in `[from, to)`: the windows in which a row
/// with that multiplier is refreshed.
#[inline]
pub fn refreshes_between(from: u64, to: u64, multiplier: u64) -> u64 {
    to.div_ceil(multiplier) - from.div_ceil(multiplier)
}

/// `1 - sum_b n_b / mult_b / N`: fraction of baseline refreshes avoided
/// when `counts[b]` rows refresh every `multipliers[b]` windows.
pub fn savings_from_counts(counts: &[u64], multipliers: &[u64]) -> f64 {
    let rows: u64 = counts.iter().sum();
    if rows == 0 {
        return 0.0;
    }
    let issued: f64 = counts.iter().zip(multipliers).map(|(&n, &m)| n as f64 / m as f64).sum();
    1.0 - issued / rows as f64
}

/// Fraction of baseline refreshes eliminated over `horizon_windows`,
/// including the extra refreshes false positives cause.
pub fn savings_fraction(bins: &BinSet, device: &DeviceConfig, horizon_windows: u64) -> Result<f64> {
    let period = bins.config().lcm_multiplier();
    if horizon_windows == 0 || !horizon_windows.is_multiple_of(period) {
        return Err(Error::InvalidParams(format!(
            "horizon of {horizon_windows} windows is not a positive multiple of the schedule period ({period})"
        )));
    }
    let rows = device.num_rows();
    let issued: u64 = (0..rows)
        .map(|row| refreshes_between(0, horizon_windows, bins.row_multiplier(row)))
        .sum();
    Ok(1.0 - issued as f64 / (rows as f64 * horizon_windows as f64))
}
