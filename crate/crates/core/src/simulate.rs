//! Closed-loop refresh simulation.
//!
//! Generates ground truth, profiles it, builds the retention bins, then runs
//! the multi-rate schedule over discrete base windows. A retention failure
//! is recorded for every `(row, window)` where the time since the row's last
//! refresh, measured at the end of the window, exceeds the smallest true
//! retention the row had at any point since that refresh.
//!
//! Rows only interact through shared configuration, so the engine advances
//! each row independently over a window range: rows without VRT have
//! constant retention and are counted in closed form, VRT rows are stepped
//! window by window. The state after any window boundary can be
//! checkpointed and resumed bit-identically.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::profiler::{self, MisclassificationReport, ProfileMode, ProfilerConfig, RetentionProfile};
use crate::raidr::{self, refreshes_between, BinConfig, BinSet, BinSummaryRow, BloomBudget, FilterSizing};
use crate::retention::{DeviceConfig, DpdModel, RetentionDistribution, RetentionGroundTruth, VrtModel, VrtTrajectory};
use crate::rng::split_seed;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"RSIM";
const ROW_RECORD_LEN: usize = 8 + 8 + 1 + 8 + 8;

/// Child-seed index for the Bloom hash family.
const BLOOM_SEED_INDEX: u64 = 0xb1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub horizon_windows: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon_windows: 1024,
            seed: 1,
        }
    }
}

/// Everything one simulation run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub device: DeviceConfig,
    pub retention: RetentionDistribution,
    pub vrt: VrtModel,
    pub dpd: DpdModel,
    pub profiler: ProfilerConfig,
    pub bins: BinConfig,
    pub bloom: FilterSizing,
    pub sim: SimConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            device: DeviceConfig::default(),
            retention: RetentionDistribution::default(),
            vrt: VrtModel::default(),
            dpd: DpdModel::default(),
            profiler: ProfilerConfig::default(),
            bins: BinConfig::default(),
            bloom: FilterSizing::TargetFpr(1e-3),
            sim: SimConfig::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.retention.validate(&self.device)?;
        self.vrt.validate()?;
        self.dpd.validate()?;
        self.profiler.validate(self.dpd.num_patterns)?;
        self.bins.validate()?;
        if self.bins.base_interval_ms != self.device.trefw_ms {
            return Err(Error::config(
                "bins.base_interval_ms",
                format!("must equal device.trefw_ms ({})", self.device.trefw_ms),
            ));
        }
        self.bloom_budget().validate()?;
        if self.sim.horizon_windows < self.bins.max_multiplier() {
            return Err(Error::config(
                "sim.horizon_windows",
                format!(
                    "must be at least the largest bin multiplier ({})",
                    self.bins.max_multiplier()
                ),
            ));
        }
        Ok(())
    }

    pub fn bloom_budget(&self) -> BloomBudget {
        BloomBudget {
            sizing: self.bloom,
            seed: split_seed(self.sim.seed, BLOOM_SEED_INDEX),
        }
    }

    /// SHA-256 of the canonical key-value rendering.
    pub fn digest(&self) -> [u8; 32] {
        let text = crate::config::render_scenario(self);
        Sha256::digest(text.as_bytes()).into()
    }
}

/// Per-row quantities fixed for the whole run.
#[derive(Debug, Clone, Copy)]
struct RowStatic {
    multiplier: u64,
    profiled_multiplier: u64,
    high_ms: f64,
    low_ms: f64,
    has_vrt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RowState {
    last_refresh: u64,
    /// Smallest true retention since `last_refresh`.
    gap_min_ms: f64,
    /// VRT state in the last simulated window.
    low: bool,
    refreshes: u64,
    failures: u64,
}

impl RowState {
    const INITIAL: RowState = RowState {
        last_refresh: 0,
        gap_min_ms: f64::INFINITY,
        low: false,
        refreshes: 0,
        failures: 0,
    };
}

/// Elapsed time at the end of the `gap_window`-th window of a refresh gap
/// (1-based), in ms.
#[inline]
fn elapsed_ms(gap_window: u64, base_ms: f64) -> f64 {
    gap_window as f64 * base_ms
}

/// Number of positions `j` in `1..=multiplier` that survive a constant
/// retention of `retention_ms`.
fn safe_positions(multiplier: u64, retention_ms: f64, base_ms: f64) -> u64 {
    let mut q = ((retention_ms / base_ms).floor().max(0.0) as u64).min(multiplier);
    while q < multiplier && elapsed_ms(q + 1, base_ms) <= retention_ms {
        q += 1;
    }
    while q > 0 && elapsed_ms(q, base_ms) > retention_ms {
        q -= 1;
    }
    q
}

/// Failing windows in `[0, x)` for a row refreshed at multiples of
/// `multiplier` whose first `safe` gap positions are safe.
#[inline]
fn failing_windows_before(x: u64, multiplier: u64, safe: u64) -> u64 {
    x - ((x / multiplier) * safe + (x % multiplier).min(safe))
}

/// Advance a row whose retention never changes.
fn advance_constant(row: &RowStatic, st: &mut RowState, from: u64, to: u64, base_ms: f64) {
    let m = row.multiplier;
    let safe = safe_positions(m, row.high_ms, base_ms);
    st.refreshes += refreshes_between(from, to, m);
    st.failures += failing_windows_before(to, m, safe) - failing_windows_before(from, m, safe);
    st.last_refresh = (to - 1) / m * m;
    st.gap_min_ms = row.high_ms;
}

/// Shared inputs for stepping VRT rows.
struct StepContext {
    base_ms: f64,
    vrt: VrtModel,
    seed: u64,
}

/// Advance a VRT row one window at a time. Returns schedule violations.
fn advance_stepped(ctx: &StepContext, index: u64, row: &RowStatic, st: &mut RowState, from: u64, to: u64) -> u64 {
    let base_ms = ctx.base_ms;
    let m = row.multiplier;
    let mut violations = 0;
    let mut chain = if from == 0 {
        VrtTrajectory::new(ctx.vrt, ctx.seed, index)
    } else {
        VrtTrajectory::resume(ctx.vrt, ctx.seed, index, from - 1, st.low)
    };
    for w in from..to {
        let low = if w == 0 { chain.is_low() } else { chain.advance() };
        if w % m == 0 {
            if w > 0 && w - st.last_refresh > m {
                violations += 1;
            }
            st.refreshes += 1;
            st.last_refresh = w;
            st.gap_min_ms = f64::INFINITY;
        }
        let retention = if low { row.low_ms } else { row.high_ms };
        st.gap_min_ms = st.gap_min_ms.min(retention);
        if elapsed_ms(w - st.last_refresh + 1, base_ms) > st.gap_min_ms {
            st.failures += 1;
        }
    }
    st.low = chain.is_low();
    violations
}

/// Wall-clock time of a run. Always compares equal so reports from
/// repeated runs can be compared directly.
#[derive(Debug, Clone, Copy, Default)]
pub struct WallTime(pub Duration);

impl PartialEq for WallTime {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub seed: u64,
    pub num_rows: u64,
    pub windows_simulated: u64,
    pub weak_rows: u64,
    pub vrt_rows: u64,
    pub refreshes_issued: u64,
    pub refreshes_baseline_equiv: u64,
    pub savings_fraction: f64,
    pub retention_failures: u64,
    pub unsafe_rows: u64,
    /// Refreshes beyond what the profiled bins alone would issue.
    pub fpr_extra_refreshes: u64,
    pub schedule_violations: u64,
    pub controller_storage_bits: u64,
    pub misclassification: MisclassificationReport,
    pub bins: Vec<BinSummaryRow>,
    /// Rows per bin as seen through the filters, default bin last.
    pub effective_bin_counts: Vec<u64>,
    pub profile_mode: ProfileMode,
    pub guard_band_factor: f64,
    pub max_multiplier: u64,
    pub config_echo: Vec<(String, String)>,
    pub wall_time: WallTime,
}

impl SimReport {
    /// Upper bound on savings: every row in the default bin.
    pub fn savings_bound(&self) -> f64 {
        1.0 - 1.0 / self.max_multiplier as f64
    }

    /// Invariants every run must satisfy. Empty means clean.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.profile_mode == ProfileMode::Oracle && self.guard_band_factor == 1.0 && self.retention_failures > 0 {
            out.push(format!(
                "oracle_safety: {} retention failures with oracle profiling and guard 1",
                self.retention_failures
            ));
        }
        if self.schedule_violations > 0 {
            out.push(format!(
                "refresh_guarantee: {} refresh gaps exceeded the bin interval",
                self.schedule_violations
            ));
        }
        let bound = self.savings_bound();
        if self.savings_fraction > bound + 1e-12 {
            out.push(format!(
                "savings_bound: savings {} exceeds 1 - 1/{} = {bound}",
                self.savings_fraction, self.max_multiplier
            ));
        }
        let all_default = self.effective_bin_counts[..self.effective_bin_counts.len() - 1]
            .iter()
            .all(|&n| n == 0);
        let full_periods = self.windows_simulated.is_multiple_of(self.max_multiplier);
        if full_periods && all_default != ((self.savings_fraction - bound).abs() < 1e-12) {
            out.push(format!(
                "savings_bound: savings {} vs bound {bound} inconsistent with bin occupancy",
                self.savings_fraction
            ));
        }
        let expected = 1.0 - self.refreshes_issued as f64 / self.refreshes_baseline_equiv.max(1) as f64;
        if (expected - self.savings_fraction).abs() > 1e-12 {
            out.push("savings_accounting: savings != 1 - issued/baseline".into());
        }
        out
    }

    /// Flat `key = value` document. Wall time is not included so the
    /// file is reproducible.
    pub fn to_kv(&self) -> String {
        let mut out = String::from("# retention-aware refresh simulation report\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("num_rows", self.num_rows.to_string());
        kv("windows_simulated", self.windows_simulated.to_string());
        kv("weak_rows", self.weak_rows.to_string());
        kv("vrt_rows", self.vrt_rows.to_string());
        kv("refreshes_issued", self.refreshes_issued.to_string());
        kv("refreshes_baseline_equiv", self.refreshes_baseline_equiv.to_string());
        kv("savings_fraction", self.savings_fraction.to_string());
        kv("savings_bound", self.savings_bound().to_string());
        kv("retention_failures", self.retention_failures.to_string());
        kv("unsafe_rows", self.unsafe_rows.to_string());
        kv("fpr_extra_refreshes", self.fpr_extra_refreshes.to_string());
        kv("schedule_violations", self.schedule_violations.to_string());
        kv("controller_storage_bits", self.controller_storage_bits.to_string());
        kv(
            "misclassified_unsafe_rows",
            self.misclassification.unsafe_rows.to_string(),
        );
        kv(
            "misclassified_wasteful_rows",
            self.misclassification.wasteful_rows.to_string(),
        );
        kv(
            "misclassified_exact_rows",
            self.misclassification.exact_rows.to_string(),
        );
        for (bin, n) in self.effective_bin_counts.iter().enumerate() {
            kv(&format!("effective_rows.bin{bin}"), n.to_string());
        }
        kv("refresh_unit", "row".to_string());
        for (k, v) in &self.config_echo {
            kv(&format!("config.{k}"), v.clone());
        }
        out
    }
}

/// A simulation in progress.
#[derive(Debug, Clone)]
pub struct Simulation {
    scenario: Scenario,
    digest: [u8; 32],
    ground_truth: RetentionGroundTruth,
    profile: RetentionProfile,
    assigned: Vec<u8>,
    bins: BinSet,
    rows: Vec<RowStatic>,
    state: Vec<RowState>,
    window: u64,
    schedule_violations: u64,
}

impl Simulation {
    /// Validate, generate ground truth, profile and build bins.
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let seed = scenario.sim.seed;
        let gt = RetentionGroundTruth::generate(
            &scenario.device,
            &scenario.retention,
            &scenario.vrt,
            &scenario.dpd,
            seed,
        )?;
        let profile = profiler::profile(&gt, &scenario.profiler, seed)?;
        let assigned = raidr::assign_bins(&profile, &scenario.bins)?;
        let bins = BinSet::from_assignment(&assigned, &scenario.bins, &scenario.bloom_budget())?;
        Ok(Self::from_parts(scenario.clone(), gt, profile, assigned, bins))
    }

    fn from_parts(
        scenario: Scenario,
        ground_truth: RetentionGroundTruth,
        profile: RetentionProfile,
        assigned: Vec<u8>,
        bins: BinSet,
    ) -> Self {
        let cfg = &scenario.bins;
        let low_factor = scenario.vrt.low_factor;
        let rows: Vec<RowStatic> = (0..ground_truth.num_rows())
            .map(|row| {
                let high_ms = ground_truth.high_state_min_ms(row);
                RowStatic {
                    multiplier: bins.row_multiplier(row),
                    profiled_multiplier: cfg.multiplier(assigned[row as usize] as usize),
                    high_ms,
                    low_ms: high_ms * low_factor,
                    has_vrt: ground_truth.has_vrt(row),
                }
            })
            .collect();
        let state = vec![RowState::INITIAL; rows.len()];
        Self {
            digest: scenario.digest(),
            scenario,
            ground_truth,
            profile,
            assigned,
            bins,
            rows,
            state,
            window: 0,
            schedule_violations: 0,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn ground_truth(&self) -> &RetentionGroundTruth {
        &self.ground_truth
    }

    pub fn profile(&self) -> &RetentionProfile {
        &self.profile
    }

    pub fn bins(&self) -> &BinSet {
        &self.bins
    }

    /// Profiled bin of every row.
    pub fn assigned_bins(&self) -> &[u8] {
        &self.assigned
    }

    /// Number of windows simulated so far.
    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn is_finished(&self) -> bool {
        self.window >= self.scenario.sim.horizon_windows
    }

    /// Refreshes issued to each row so far.
    pub fn row_refreshes(&self) -> Vec<u64> {
        self.state.iter().map(|s| s.refreshes).collect()
    }

    /// Failure events of each row so far.
    pub fn row_failures(&self) -> Vec<u64> {
        self.state.iter().map(|s| s.failures).collect()
    }

    /// Simulate the next `windows` windows.
    pub fn advance(&mut self, windows: u64) {
        if windows == 0 {
            return;
        }
        let from = self.window;
        let to = from + windows;
        let ctx = StepContext {
            base_ms: self.scenario.bins.base_interval_ms,
            vrt: self.scenario.vrt,
            seed: self.scenario.sim.seed,
        };
        let violations: u64 = self
            .rows
            .par_iter()
            .zip(self.state.par_iter_mut())
            .enumerate()
            .map(|(index, (row, st))| {
                if row.has_vrt {
                    advance_stepped(&ctx, index as u64, row, st, from, to)
                } else {
                    advance_constant(row, st, from, to, ctx.base_ms);
                    0
                }
            })
            .sum();
        self.schedule_violations += violations;
        self.window = to;
    }

    pub fn step_window(&mut self) {
        self.advance(1);
    }

    /// Simulate up to the configured horizon.
    pub fn run_to_horizon(&mut self) {
        let remaining = self.scenario.sim.horizon_windows.saturating_sub(self.window);
        self.advance(remaining);
    }

    pub fn report(&self) -> Result<SimReport> {
        let windows = self.window;
        let num_rows = self.rows.len() as u64;
        let refreshes_issued: u64 = self.state.iter().map(|s| s.refreshes).sum();
        let profiled: u64 = self
            .rows
            .iter()
            .map(|r| refreshes_between(0, windows, r.profiled_multiplier))
            .sum();
        let baseline = num_rows * windows;
        let savings_fraction = if baseline == 0 {
            0.0
        } else {
            1.0 - refreshes_issued as f64 / baseline as f64
        };
        let cfg = &self.scenario.bins;
        let mut effective = vec![0u64; cfg.default_bin() + 1];
        for row in 0..num_rows {
            effective[self.bins.query_bin(row)] += 1;
        }
        Ok(SimReport {
            seed: self.scenario.sim.seed,
            num_rows,
            windows_simulated: windows,
            weak_rows: self.ground_truth.weak_rows(self.scenario.retention.weak_ceiling_ms) as u64,
            vrt_rows: self.rows.iter().filter(|r| r.has_vrt).count() as u64,
            refreshes_issued,
            refreshes_baseline_equiv: baseline,
            savings_fraction,
            retention_failures: self.state.iter().map(|s| s.failures).sum(),
            unsafe_rows: self.state.iter().filter(|s| s.failures > 0).count() as u64,
            fpr_extra_refreshes: refreshes_issued.saturating_sub(profiled),
            schedule_violations: self.schedule_violations,
            controller_storage_bits: self.bins.storage_bits(),
            misclassification: profiler::misclassification_report(&self.profile, &self.ground_truth, cfg)?,
            bins: self.bins.summary(&self.assigned),
            effective_bin_counts: effective,
            profile_mode: self.profile.mode,
            guard_band_factor: self.profile.config.guard_band_factor,
            max_multiplier: cfg.max_multiplier(),
            config_echo: crate::config::scenario_entries(&self.scenario),
            wall_time: WallTime::default(),
        })
    }

    /// Serialize the dynamic state at the current window boundary.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 32 + 8 * 3 + self.state.len() * ROW_RECORD_LEN + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.window.to_le_bytes());
        out.extend_from_slice(&self.schedule_violations.to_le_bytes());
        out.extend_from_slice(&(self.state.len() as u64).to_le_bytes());
        for s in &self.state {
            out.extend_from_slice(&s.last_refresh.to_le_bytes());
            out.extend_from_slice(&s.gap_min_ms.to_bits().to_le_bytes());
            out.push(s.low as u8);
            out.extend_from_slice(&s.refreshes.to_le_bytes());
            out.extend_from_slice(&s.failures.to_le_bytes());
        }
        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum);
        out
    }

    /// Rebuild a simulation for `scenario` and load a checkpoint into it.
    pub fn restore(scenario: &Scenario, blob: &[u8]) -> Result<Self> {
        let header = 4 + 4 + 32 + 24;
        if blob.len() < header + 32 {
            return Err(Error::CorruptCheckpoint(format!("{} bytes is too short", blob.len())));
        }
        if &blob[..4] != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(blob[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, checksum) = blob.split_at(blob.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
        }
        let u64_at = |at: usize| u64::from_le_bytes(body[at..at + 8].try_into().unwrap());
        let window = u64_at(40);
        let schedule_violations = u64_at(48);
        let n = u64_at(56) as usize;
        if body.len() != header + n * ROW_RECORD_LEN {
            return Err(Error::CorruptCheckpoint(
                "row records do not match the declared row count".into(),
            ));
        }

        let mut sim = Self::new(scenario)?;
        if body[8..40] != sim.digest {
            return Err(Error::CorruptCheckpoint(
                "checkpoint belongs to a different scenario".into(),
            ));
        }
        if n != sim.state.len() {
            return Err(Error::CorruptCheckpoint("row count differs from the scenario".into()));
        }
        for (i, s) in sim.state.iter_mut().enumerate() {
            let at = header + i * ROW_RECORD_LEN;
            *s = RowState {
                last_refresh: u64_at(at),
                gap_min_ms: f64::from_bits(u64_at(at + 8)),
                low: body[at + 16] != 0,
                refreshes: u64_at(at + 17),
                failures: u64_at(at + 25),
            };
        }
        sim.window = window;
        sim.schedule_violations = schedule_violations;
        Ok(sim)
    }
}

/// Run a scenario to its horizon.
pub fn run(scenario: &Scenario) -> Result<SimReport> {
    let started = Instant::now();
    let mut sim = Simulation::new(scenario)?;
    sim.run_to_horizon();
    let mut report = sim.report()?;
    report.wall_time = WallTime(started.elapsed());
    Ok(report)
}
