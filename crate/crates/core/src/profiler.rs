//! Simulated retention profiling.
//!
//! Oracle mode reads the true minima directly. Measured mode tests a random
//! subset of data patterns in a few rounds spread over a profiling campaign,
//! so it misses a row's worst pattern unless that pattern was tested, and
//! misses a VRT row's low state unless a round happened to land in it. Both
//! modes divide the result by a guard band before binning.

use std::fmt::Write as _;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::raidr::BinConfig;
use crate::retention::{RetentionGroundTruth, VrtTrajectory};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileMode {
    Oracle,
    Measured,
}

impl ProfileMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileMode::Oracle => "oracle",
            ProfileMode::Measured => "measured",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilerConfig {
    pub mode: ProfileMode,
    pub patterns_tested: u32,
    pub rounds: u32,
    pub guard_band_factor: f64,
    /// Number of refresh windows the profiling campaign covers.
    pub profiling_window_span: u64,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        Self {
            mode: ProfileMode::Oracle,
            patterns_tested: 1,
            rounds: 1,
            guard_band_factor: 1.0,
            profiling_window_span: 1,
        }
    }
}

impl ProfilerConfig {
    pub fn validate(&self, num_patterns: u32) -> Result<()> {
        if self.patterns_tested == 0 {
            return Err(Error::config("profiler.patterns_tested", "must be at least 1"));
        }
        if self.patterns_tested > num_patterns {
            return Err(Error::config(
                "profiler.patterns_tested",
                format!("{} exceeds dpd.num_patterns = {num_patterns}", self.patterns_tested),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("profiler.rounds", "must be at least 1"));
        }
        if !(self.guard_band_factor >= 1.0 && self.guard_band_factor.is_finite()) {
            return Err(Error::config("profiler.guard_band_factor", "must be >= 1"));
        }
        if self.profiling_window_span == 0 {
            return Err(Error::config("profiler.window_span", "must be at least 1"));
        }
        Ok(())
    }

    /// Windows at which profiling rounds run, spread uniformly over the span.
    pub fn round_windows(&self) -> Vec<u64> {
        (0..u64::from(self.rounds))
            .map(|r| r * self.profiling_window_span / u64::from(self.rounds))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionProfile {
    /// Raw observed minimum retention per row.
    pub observed_ms: Vec<f64>,
    /// `observed_ms / guard_band_factor`, the value used for binning.
    pub measured_ms: Vec<f64>,
    pub mode: ProfileMode,
    pub config: ProfilerConfig,
}

impl RetentionProfile {
    pub fn num_rows(&self) -> u64 {
        self.measured_ms.len() as u64
    }

    /// `row_index,measured_retention_ms,assigned_bin`; the bin column is
    /// empty until bins are assigned.
    pub fn to_csv(&self, assigned_bins: Option<&[u8]>) -> String {
        let mut out = String::from("row_index,measured_retention_ms,assigned_bin\n");
        for (row, ms) in self.measured_ms.iter().enumerate() {
            match assigned_bins {
                Some(bins) => {
                    let _ = writeln!(out, "{row},{ms},{}", bins[row]);
                }
                None => {
                    let _ = writeln!(out, "{row},{ms},");
                }
            }
        }
        out
    }
}

/// Whether a measured-mode profile of `row` tests its worst pattern.
fn worst_pattern_tested(gt: &RetentionGroundTruth, cfg: &ProfilerConfig, seed: u64, row: u64) -> bool {
    let num_patterns = gt.dpd().num_patterns;
    if cfg.patterns_tested >= num_patterns {
        return true;
    }
    let mut stream = rng::row_stream(seed, Purpose::ProfilePatterns, row);
    let worst = gt.dpd_worst_pattern(row) as usize;
    index::sample(&mut stream, num_patterns as usize, cfg.patterns_tested as usize)
        .iter()
        .any(|p| p == worst)
}

/// Whether any profiling round observes `row` in its VRT low state.
fn low_state_observed(gt: &RetentionGroundTruth, round_windows: &[u64], row: u64) -> bool {
    let mut chain = VrtTrajectory::new(*gt.vrt(), gt.seed(), row);
    for &w in round_windows {
        while chain.window() < w {
            chain.advance();
        }
        if chain.is_low() {
            return true;
        }
    }
    false
}

pub fn profile(gt: &RetentionGroundTruth, cfg: &ProfilerConfig, seed: u64) -> Result<RetentionProfile> {
    cfg.validate(gt.dpd().num_patterns)?;
    let rounds = cfg.round_windows();
    let dpd_factor = gt.dpd().worst_factor();
    let low_factor = gt.vrt().low_factor;

    let observed_ms: Vec<f64> = (0..gt.num_rows())
        .map(|row| match cfg.mode {
            ProfileMode::Oracle => gt.oracle_min_ms(row),
            ProfileMode::Measured => {
                let mut ms = gt.base_retention_ms(row);
                if gt.dpd().enabled && worst_pattern_tested(gt, cfg, seed, row) {
                    ms *= dpd_factor;
                }
                if gt.has_vrt(row) && low_state_observed(gt, &rounds, row) {
                    ms *= low_factor;
                }
                ms
            }
        })
        .collect();
    let measured_ms = observed_ms.iter().map(|ms| ms / cfg.guard_band_factor).collect();
    Ok(RetentionProfile {
        observed_ms,
        measured_ms,
        mode: cfg.mode,
        config: *cfg,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MisclassificationReport {
    /// Profiled bin refreshes less often than the row's true bin needs.
    pub unsafe_rows: u64,
    /// Profiled bin refreshes more often than needed.
    pub wasteful_rows: u64,
    pub exact_rows: u64,
}

/// Compare each row's profiled bin against the bin of its true minimum
/// retention over all patterns and VRT states.
pub fn misclassification_report(
    profile: &RetentionProfile,
    gt: &RetentionGroundTruth,
    bins: &BinConfig,
) -> Result<MisclassificationReport> {
    if profile.num_rows() != gt.num_rows() {
        return Err(Error::InvalidParams(format!(
            "profile has {} rows but ground truth has {}",
            profile.num_rows(),
            gt.num_rows()
        )));
    }
    let mut report = MisclassificationReport::default();
    for (row, &measured) in profile.measured_ms.iter().enumerate() {
        let profiled = bins.interval_ms(bins.bin_for(measured));
        let truth = bins.interval_ms(bins.bin_for(gt.oracle_min_ms(row as u64)));
        if profiled > truth {
            report.unsafe_rows += 1;
        } else if profiled < truth {
            report.wasteful_rows += 1;
        } else {
            report.exact_rows += 1;
        }
    }
    Ok(report)
}
