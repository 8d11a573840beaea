//! Ground-truth retention model.
//!
//! Each row has a base retention time drawn from a two-population
//! distribution (a small weak population plus a strong bulk), an optional
//! data-pattern-dependence (DPD) worst case, and an optional variable
//! retention time (VRT) two-state Markov chain stepped once per refresh
//! window. The true minimum retention of a row in a window is
//!
//! ```text
//! base * (worst_pattern_factor if DPD) * (low_factor if VRT-low)
//! ```

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const GIBIBIT: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrfcEntry {
    pub density_bits: u64,
    pub trfc_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub density_bits: u64,
    pub row_size_bits: u64,
    /// Base retention window (tREFW).
    pub trefw_ms: f64,
    pub refresh_cmds_per_window: u32,
    /// Per-command refresh latency by density, sorted by density.
    pub trfc_table: Vec<TrfcEntry>,
    /// Table entry whose ns-per-bit slope is used above the largest entry.
    pub trfc_anchor_bits: u64,
    pub banks: u32,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            density_bits: 64 * GIBIBIT,
            row_size_bits: 64 * 1024,
            trefw_ms: 64.0,
            refresh_cmds_per_window: 8192,
            trfc_table: default_trfc_table(),
            trfc_anchor_bits: 4 * GIBIBIT,
            banks: 8,
        }
    }
}

/// DDR3-era tRFC values: 1 Gb 110 ns, 2 Gb 160 ns, 4 Gb 260 ns, 8 Gb 350 ns.
pub fn default_trfc_table() -> Vec<TrfcEntry> {
    [(1, 110.0), (2, 160.0), (4, 260.0), (8, 350.0)]
        .into_iter()
        .map(|(gb, ns)| TrfcEntry {
            density_bits: gb * GIBIBIT,
            trfc_ns: ns,
        })
        .collect()
}

impl DeviceConfig {
    /// Device with exactly `num_rows` rows of the default row size.
    pub fn with_rows(num_rows: u64) -> Self {
        let base = Self::default();
        Self {
            density_bits: num_rows * base.row_size_bits,
            ..base
        }
    }

    pub fn num_rows(&self) -> u64 {
        self.density_bits / self.row_size_bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_size_bits == 0 {
            return Err(Error::config("device.row_size_bits", "must be positive"));
        }
        if self.density_bits == 0 {
            return Err(Error::config("device.density_bits", "must be positive"));
        }
        if !self.density_bits.is_multiple_of(self.row_size_bits) {
            return Err(Error::config(
                "device.density_bits",
                format!(
                    "{} is not a whole number of {}-bit rows",
                    self.density_bits, self.row_size_bits
                ),
            ));
        }
        if self.num_rows() > u64::from(u32::MAX) {
            return Err(Error::config(
                "device.density_bits",
                "more than 2^32 rows is unsupported",
            ));
        }
        if !(self.trefw_ms > 0.0 && self.trefw_ms.is_finite()) {
            return Err(Error::config("device.trefw_ms", "must be positive"));
        }
        if self.refresh_cmds_per_window == 0 {
            return Err(Error::config("device.refresh_cmds_per_window", "must be positive"));
        }
        if self.banks == 0 {
            return Err(Error::config("device.banks", "must be positive"));
        }
        if self.trfc_table.is_empty() {
            return Err(Error::config("device.trfc_table", "must have at least one entry"));
        }
        for pair in self.trfc_table.windows(2) {
            if pair[1].density_bits <= pair[0].density_bits {
                return Err(Error::config(
                    "device.trfc_table",
                    "densities must be strictly increasing",
                ));
            }
            if pair[1].trfc_ns < pair[0].trfc_ns {
                return Err(Error::config(
                    "device.trfc_table",
                    "tRFC must be non-decreasing in density",
                ));
            }
        }
        if self
            .trfc_table
            .iter()
            .any(|e| !(e.trfc_ns > 0.0 && e.trfc_ns.is_finite()) || e.density_bits == 0)
        {
            return Err(Error::config("device.trfc_table", "entries must be strictly positive"));
        }
        let anchor = self
            .trfc_table
            .iter()
            .find(|e| e.density_bits == self.trfc_anchor_bits)
            .ok_or_else(|| Error::config("device.trfc_anchor", "must name a density in the tRFC table"))?;
        let last = self.trfc_table[self.trfc_table.len() - 1];
        if anchor.trfc_ns / anchor.density_bits as f64 * (last.density_bits as f64) < last.trfc_ns {
            return Err(Error::config(
                "device.trfc_anchor",
                "extrapolating from this anchor would make tRFC decrease past the table",
            ));
        }
        Ok(())
    }

    /// tRFC at `density_bits`: table value, linear interpolation between
    /// entries, proportional scaling from the smallest entry below the table,
    /// and linear-in-density scaling from the anchor entry above it.
    pub fn trfc_ns(&self, density_bits: u64) -> f64 {
        let table = &self.trfc_table;
        let d = density_bits as f64;
        let first = table[0];
        let last = table[table.len() - 1];
        if density_bits <= first.density_bits {
            return first.trfc_ns * d / first.density_bits as f64;
        }
        if density_bits > last.density_bits {
            let anchor = table
                .iter()
                .find(|e| e.density_bits == self.trfc_anchor_bits)
                .copied()
                .unwrap_or(last);
            return anchor.trfc_ns * d / anchor.density_bits as f64;
        }
        for pair in table.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            if density_bits <= hi.density_bits {
                let t = (d - lo.density_bits as f64) / (hi.density_bits - lo.density_bits) as f64;
                return lo.trfc_ns + t * (hi.trfc_ns - lo.trfc_ns);
            }
        }
        last.trfc_ns
    }
}

/// Retention law of the weak population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeakLaw {
    /// Uniform over `[floor_ms, weak_ceiling_ms)`.
    Uniform,
    /// Every weak row has the same retention.
    PointMass { ms: f64 },
    /// Log-normal truncated to `[floor_ms, weak_ceiling_ms)`.
    LogNormalTail { median_ms: f64, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionKind {
    TwoPopulation,
    LogNormalTail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionDistribution {
    /// Probability that a row is weak (retention below `weak_ceiling_ms`).
    pub weak_fraction: f64,
    pub weak_law: WeakLaw,
    pub floor_ms: f64,
    /// Upper edge of the weak population; normally the longest bin threshold.
    pub weak_ceiling_ms: f64,
    pub strong_value_ms: f64,
}

impl Default for RetentionDistribution {
    fn default() -> Self {
        Self {
            weak_fraction: 1e-3,
            weak_law: WeakLaw::Uniform,
            floor_ms: 64.0,
            weak_ceiling_ms: 256.0,
            strong_value_ms: 2560.0,
        }
    }
}

impl RetentionDistribution {
    pub fn kind(&self) -> DistributionKind {
        match self.weak_law {
            WeakLaw::LogNormalTail { .. } => DistributionKind::LogNormalTail,
            _ => DistributionKind::TwoPopulation,
        }
    }

    pub fn validate(&self, device: &DeviceConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weak_fraction) {
            return Err(Error::config("retention.weak_fraction", "must lie in [0, 1]"));
        }
        if self.floor_ms.is_nan() || self.floor_ms < device.trefw_ms {
            return Err(Error::config(
                "retention.floor_ms",
                format!("must be >= tREFW ({} ms)", device.trefw_ms),
            ));
        }
        if !(self.weak_ceiling_ms > self.floor_ms && self.weak_ceiling_ms.is_finite()) {
            return Err(Error::config(
                "retention.weak_ceiling_ms",
                "must exceed retention.floor_ms",
            ));
        }
        if !(self.strong_value_ms >= self.weak_ceiling_ms && self.strong_value_ms.is_finite()) {
            return Err(Error::config(
                "retention.strong_value_ms",
                "must be >= retention.weak_ceiling_ms",
            ));
        }
        match self.weak_law {
            WeakLaw::Uniform => {}
            WeakLaw::PointMass { ms } => {
                if !(ms >= self.floor_ms && ms < self.weak_ceiling_ms) {
                    return Err(Error::config(
                        "retention.point_ms",
                        "must lie in [floor_ms, weak_ceiling_ms)",
                    ));
                }
            }
            WeakLaw::LogNormalTail { median_ms, sigma } => {
                if !(median_ms > 0.0 && median_ms.is_finite()) {
                    return Err(Error::config("retention.lognormal_median_ms", "must be positive"));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::config("retention.lognormal_sigma", "must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Map a uniform draw onto the weak law's support.
    fn sample_weak(&self, u: f64) -> f64 {
        let hi = self.weak_ceiling_ms.next_down();
        let value = match self.weak_law {
            WeakLaw::Uniform => self.floor_ms + u * (self.weak_ceiling_ms - self.floor_ms),
            WeakLaw::PointMass { ms } => ms,
            WeakLaw::LogNormalTail { median_ms, sigma } => {
                let normal = Normal::new(median_ms.ln(), sigma).expect("validated lognormal");
                let lo_p = normal.cdf(self.floor_ms.ln());
                let hi_p = normal.cdf(self.weak_ceiling_ms.ln());
                let p = (lo_p + u * (hi_p - lo_p)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                normal.inverse_cdf(p).exp()
            }
        };
        value.clamp(self.floor_ms, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VrtModel {
    pub enabled: bool,
    pub affected_fraction: f64,
    /// Retention multiplier in the low state.
    pub low_factor: f64,
    /// Per-window transition probabilities.
    pub p_high_to_low: f64,
    pub p_low_to_high: f64,
}

impl Default for VrtModel {
    fn default() -> Self {
        Self {
            enabled: false,
            affected_fraction: 0.01,
            low_factor: 0.5,
            p_high_to_low: 0.05,
            p_low_to_high: 0.2,
        }
    }
}

impl VrtModel {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("vrt.affected_fraction", self.affected_fraction),
            ("vrt.p_high_to_low", self.p_high_to_low),
            ("vrt.p_low_to_high", self.p_low_to_high),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, "must be a probability in [0, 1]"));
            }
        }
        if !(self.low_factor > 0.0 && self.low_factor <= 1.0) {
            return Err(Error::config("vrt.low_factor", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// State in the next window given the current state and a uniform draw.
    #[inline]
    pub fn transition(&self, low: bool, u: f64) -> bool {
        if low {
            u >= self.p_low_to_high
        } else {
            u < self.p_high_to_low
        }
    }

    /// Multiplier applied while in the given state.
    #[inline]
    pub fn factor(&self, low: bool) -> f64 {
        if low {
            self.low_factor
        } else {
            1.0
        }
    }

    /// Stationary probability of the low state.
    pub fn stationary_low(&self) -> f64 {
        let total = self.p_high_to_low + self.p_low_to_high;
        if total == 0.0 {
            0.0
        } else {
            self.p_high_to_low / total
        }
    }
}

/// Replays one row's VRT chain window by window. Window 0 is the high state;
/// the transition into window `w >= 1` uses draw `w` of the row's stream.
pub struct VrtTrajectory {
    model: VrtModel,
    rng: ChaCha8Rng,
    window: u64,
    low: bool,
}

impl VrtTrajectory {
    pub fn new(model: VrtModel, seed: u64, row: u64) -> Self {
        Self::resume(model, seed, row, 0, false)
    }

    /// Continue a trajectory known to be in state `low` at `window`.
    pub fn resume(model: VrtModel, seed: u64, row: u64, window: u64, low: bool) -> Self {
        let mut rng = rng::row_stream(seed, Purpose::VrtTransition, row);
        rng::seek(&mut rng, window + 1);
        Self {
            model,
            rng,
            window,
            low,
        }
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn is_low(&self) -> bool {
        self.low
    }

    /// Move to the next window and return its state.
    #[inline]
    pub fn advance(&mut self) -> bool {
        let u = rng::unit(&mut self.rng);
        self.low = self.model.transition(self.low, u);
        self.window += 1;
        self.low
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpdModel {
    pub enabled: bool,
    pub num_patterns: u32,
    /// Retention multiplier under a row's worst-case data pattern.
    pub worst_pattern_factor: f64,
}

impl Default for DpdModel {
    fn default() -> Self {
        Self {
            enabled: false,
            num_patterns: 8,
            worst_pattern_factor: 0.5,
        }
    }
}

impl DpdModel {
    pub fn validate(&self) -> Result<()> {
        if self.num_patterns == 0 {
            return Err(Error::config("dpd.num_patterns", "must be at least 1"));
        }
        if !(self.worst_pattern_factor > 0.0 && self.worst_pattern_factor <= 1.0) {
            return Err(Error::config("dpd.worst_pattern_factor", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Multiplier when the row holds its worst pattern (1 when disabled).
    pub fn worst_factor(&self) -> f64 {
        if self.enabled {
            self.worst_pattern_factor
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionGroundTruth {
    seed: u64,
    vrt: VrtModel,
    dpd: DpdModel,
    base_ms: Vec<f64>,
    dpd_worst: Vec<u32>,
    has_vrt: Vec<bool>,
    vrt_low: Vec<bool>,
    window: u64,
}

/// Per-row attributes, drawn from the row's own streams.
fn generate_row(seed: u64, row: u64, dist: &RetentionDistribution, vrt: &VrtModel, dpd: &DpdModel) -> (f64, u32, bool) {
    let weak = rng::draw(seed, Purpose::WeakMembership, row, 0) < dist.weak_fraction;
    let base = if weak {
        dist.sample_weak(rng::draw(seed, Purpose::WeakRetention, row, 0))
    } else {
        dist.strong_value_ms
    };
    let pattern = (rng::draw(seed, Purpose::DpdPattern, row, 0) * f64::from(dpd.num_patterns)) as u32;
    let has_vrt = vrt.enabled && rng::draw(seed, Purpose::VrtMembership, row, 0) < vrt.affected_fraction;
    (base, pattern.min(dpd.num_patterns - 1), has_vrt)
}

impl RetentionGroundTruth {
    pub fn generate(
        device: &DeviceConfig,
        dist: &RetentionDistribution,
        vrt: &VrtModel,
        dpd: &DpdModel,
        seed: u64,
    ) -> Result<Self> {
        device.validate()?;
        dist.validate(device)?;
        vrt.validate()?;
        dpd.validate()?;
        let n = device.num_rows() as usize;
        let mut base_ms = Vec::with_capacity(n);
        let mut dpd_worst = Vec::with_capacity(n);
        let mut has_vrt = Vec::with_capacity(n);
        for row in 0..n as u64 {
            let (base, pattern, vrt_row) = generate_row(seed, row, dist, vrt, dpd);
            base_ms.push(base);
            dpd_worst.push(pattern);
            has_vrt.push(vrt_row);
        }
        Ok(Self {
            seed,
            vrt: *vrt,
            dpd: *dpd,
            base_ms,
            dpd_worst,
            vrt_low: vec![false; n],
            has_vrt,
            window: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vrt(&self) -> &VrtModel {
        &self.vrt
    }

    pub fn dpd(&self) -> &DpdModel {
        &self.dpd
    }

    pub fn num_rows(&self) -> u64 {
        self.base_ms.len() as u64
    }

    /// Window the VRT states currently describe.
    pub fn window(&self) -> u64 {
        self.window
    }

    fn check_row(&self, row: u64) -> Result<usize> {
        if row >= self.num_rows() {
            return Err(Error::RowOutOfRange {
                row,
                num_rows: self.num_rows(),
            });
        }
        Ok(row as usize)
    }

    pub fn base_retention_ms(&self, row: u64) -> f64 {
        self.base_ms[row as usize]
    }

    pub fn dpd_worst_pattern(&self, row: u64) -> u32 {
        self.dpd_worst[row as usize]
    }

    pub fn has_vrt(&self, row: u64) -> bool {
        self.has_vrt[row as usize]
    }

    pub fn is_low(&self, row: u64) -> bool {
        self.vrt_low[row as usize]
    }

    pub fn weak_rows(&self, weak_ceiling_ms: f64) -> usize {
        self.base_ms.iter().filter(|&&b| b < weak_ceiling_ms).count()
    }

    /// Retention under the row's worst data pattern, VRT high state.
    pub fn high_state_min_ms(&self, row: u64) -> f64 {
        self.base_ms[row as usize] * self.dpd.worst_factor()
    }

    /// Minimum over all patterns and all VRT states the row can occupy.
    pub fn oracle_min_ms(&self, row: u64) -> f64 {
        let high = self.high_state_min_ms(row);
        if self.has_vrt[row as usize] {
            high * self.vrt.low_factor
        } else {
            high
        }
    }

    /// VRT state of `row` in `window`, replayed from window 0.
    pub fn vrt_low_at(&self, row: u64, window: u64) -> Result<bool> {
        let idx = self.check_row(row)?;
        if !self.has_vrt[idx] {
            return Ok(false);
        }
        if window == self.window {
            return Ok(self.vrt_low[idx]);
        }
        let mut chain = VrtTrajectory::new(self.vrt, self.seed, row);
        while chain.window() < window {
            chain.advance();
        }
        Ok(chain.is_low())
    }

    /// Worst-case retention of `row` during `window`.
    pub fn true_min_retention(&self, row: u64, window: u64) -> Result<f64> {
        let low = self.vrt_low_at(row, window)?;
        Ok(self.high_state_min_ms(row) * self.vrt.factor(low))
    }

    /// Advance every VRT row into `window`; must be called with
    /// consecutive windows starting at 1.
    pub fn step_vrt(&mut self, window: u64) -> Result<()> {
        if window != self.window + 1 {
            return Err(Error::OutOfOrderStep {
                expected: self.window + 1,
                got: window,
            });
        }
        for row in 0..self.base_ms.len() {
            if self.has_vrt[row] {
                let u = rng::draw(self.seed, Purpose::VrtTransition, row as u64, window);
                self.vrt_low[row] = self.vrt.transition(self.vrt_low[row], u);
            }
        }
        self.window = window;
        Ok(())
    }

    /// Debug dump: `row_index,base_retention_ms,has_vrt,dpd_worst_pattern`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row_index,base_retention_ms,has_vrt,dpd_worst_pattern\n");
        for row in 0..self.base_ms.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                row, self.base_ms[row], self.has_vrt[row] as u8, self.dpd_worst[row]
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_device(rows: u64) -> DeviceConfig {
        DeviceConfig::with_rows(rows)
    }

    fn vrt_on(p_hl: f64, p_lh: f64) -> VrtModel {
        VrtModel {
            enabled: true,
            affected_fraction: 1.0,
            low_factor: 0.5,
            p_high_to_low: p_hl,
            p_low_to_high: p_lh,
        }
    }

    #[test]
    fn default_device_has_about_a_million_rows() {
        let d = DeviceConfig::default();
        d.validate().unwrap();
        assert_eq!(d.num_rows(), 1 << 20);
    }

    #[test]
    fn trfc_table_lookup_and_extrapolation() {
        let d = DeviceConfig::default();
        assert_eq!(d.trfc_ns(4 * GIBIBIT), 260.0);
        assert_eq!(d.trfc_ns(8 * GIBIBIT), 350.0);
        assert_eq!(d.trfc_ns(3 * GIBIBIT), 210.0);
        assert!((d.trfc_ns(64 * GIBIBIT) - 4160.0).abs() < 1e-9);
        assert!((d.trfc_ns(16 * GIBIBIT) - 1040.0).abs() < 1e-9);
        let mut prev = 0.0;
        for gb in 1..=128 {
            let t = d.trfc_ns(gb * GIBIBIT);
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn device_validation_catches_bad_tables() {
        let mut d = DeviceConfig::default();
        d.trfc_table[1].trfc_ns = 50.0;
        assert!(d.validate().is_err());
        let d = DeviceConfig {
            trfc_anchor_bits: 3 * GIBIBIT,
            ..Default::default()
        };
        assert!(d.validate().is_err());
        let mut d = DeviceConfig::default();
        d.density_bits += 1;
        assert!(d.validate().is_err());
    }

    #[test]
    fn no_weak_rows_means_all_strong() {
        let dist = RetentionDistribution {
            weak_fraction: 0.0,
            ..Default::default()
        };
        let gt = RetentionGroundTruth::generate(
            &small_device(5000),
            &dist,
            &VrtModel::default(),
            &DpdModel::default(),
            1,
        )
        .unwrap();
        assert!((0..5000).all(|r| gt.base_retention_ms(r) == 2560.0));
    }

    #[test]
    fn point_mass_weak_law() {
        let dist = RetentionDistribution {
            weak_fraction: 1.0,
            weak_law: WeakLaw::PointMass { ms: 100.0 },
            ..Default::default()
        };
        let gt = RetentionGroundTruth::generate(
            &small_device(1000),
            &dist,
            &VrtModel::default(),
            &DpdModel::default(),
            1,
        )
        .unwrap();
        assert!((0..1000).all(|r| gt.base_retention_ms(r) == 100.0));
    }

    #[test]
    fn weak_values_stay_in_support() {
        for law in [
            WeakLaw::Uniform,
            WeakLaw::LogNormalTail {
                median_ms: 1000.0,
                sigma: 1.0,
            },
        ] {
            let dist = RetentionDistribution {
                weak_fraction: 1.0,
                weak_law: law,
                ..Default::default()
            };
            let gt = RetentionGroundTruth::generate(
                &small_device(2000),
                &dist,
                &VrtModel::default(),
                &DpdModel::default(),
                3,
            )
            .unwrap();
            for r in 0..2000 {
                let b = gt.base_retention_ms(r);
                assert!((64.0..256.0).contains(&b), "{law:?}: {b}");
            }
        }
    }

    #[test]
    fn weak_count_follows_binomial() {
        let n = 1_000_000u64;
        let gt = RetentionGroundTruth::generate(
            &small_device(n),
            &RetentionDistribution::default(),
            &VrtModel::default(),
            &DpdModel::default(),
            2024,
        )
        .unwrap();
        let weak = gt.weak_rows(256.0) as f64;
        let sigma = (n as f64 * 1e-3 * (1.0 - 1e-3)).sqrt();
        assert!((weak - 1000.0).abs() <= 4.0 * sigma, "weak = {weak}");
    }

    #[test]
    fn rejects_floor_below_trefw() {
        let dist = RetentionDistribution {
            floor_ms: 32.0,
            ..Default::default()
        };
        let err =
            RetentionGroundTruth::generate(&small_device(10), &dist, &VrtModel::default(), &DpdModel::default(), 1)
                .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref key, .. } if key == "retention.floor_ms"));
    }

    #[test]
    fn disabled_noise_means_constant_retention() {
        let gt = RetentionGroundTruth::generate(
            &small_device(200),
            &RetentionDistribution {
                weak_fraction: 0.3,
                ..Default::default()
            },
            &VrtModel::default(),
            &DpdModel::default(),
            5,
        )
        .unwrap();
        for row in 0..200 {
            for w in [0, 1, 17, 500] {
                assert_eq!(gt.true_min_retention(row, w).unwrap(), gt.base_retention_ms(row));
            }
        }
        assert!(gt.true_min_retention(200, 0).is_err());
    }

    #[test]
    fn low_state_halves_retention() {
        let mut gt = RetentionGroundTruth::generate(
            &small_device(50),
            &RetentionDistribution::default(),
            &vrt_on(1.0, 0.0),
            &DpdModel::default(),
            5,
        )
        .unwrap();
        gt.step_vrt(1).unwrap();
        for row in 0..50 {
            assert!(gt.is_low(row));
            assert_eq!(gt.true_min_retention(row, 1).unwrap(), gt.base_retention_ms(row) * 0.5);
        }
    }

    #[test]
    fn absorbing_high_state() {
        let mut gt = RetentionGroundTruth::generate(
            &small_device(100),
            &RetentionDistribution::default(),
            &vrt_on(0.0, 0.5),
            &DpdModel::default(),
            9,
        )
        .unwrap();
        for w in 1..=50 {
            gt.step_vrt(w).unwrap();
            assert!((0..100).all(|r| !gt.is_low(r)));
        }
    }

    #[test]
    fn certain_transitions_alternate() {
        let mut gt = RetentionGroundTruth::generate(
            &small_device(10),
            &RetentionDistribution::default(),
            &vrt_on(1.0, 1.0),
            &DpdModel::default(),
            9,
        )
        .unwrap();
        for w in 1..=20 {
            gt.step_vrt(w).unwrap();
            assert!((0..10).all(|r| gt.is_low(r) == (w % 2 == 1)));
        }
    }

    #[test]
    fn step_must_be_in_order() {
        let mut gt = RetentionGroundTruth::generate(
            &small_device(10),
            &RetentionDistribution::default(),
            &vrt_on(0.5, 0.5),
            &DpdModel::default(),
            9,
        )
        .unwrap();
        assert!(matches!(gt.step_vrt(2), Err(Error::OutOfOrderStep { .. })));
    }

    #[test]
    fn replay_matches_stepping() {
        let mut gt = RetentionGroundTruth::generate(
            &small_device(64),
            &RetentionDistribution::default(),
            &vrt_on(0.3, 0.4),
            &DpdModel::default(),
            77,
        )
        .unwrap();
        let fresh = gt.clone();
        for w in 1..=40 {
            gt.step_vrt(w).unwrap();
            for row in 0..64 {
                assert_eq!(gt.is_low(row), fresh.vrt_low_at(row, w).unwrap());
            }
        }
    }

    #[test]
    fn stationary_low_occupancy() {
        // Symmetric chain: stationary low fraction 0.1 / (0.1 + 0.1) = 0.5.
        let model = vrt_on(0.1, 0.1);
        let mut chain = VrtTrajectory::new(model, 3, 0);
        let mut low = 0u32;
        for _ in 0..10_000 {
            low += chain.advance() as u32;
        }
        let frac = f64::from(low) / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn generation_is_order_independent() {
        let dist = RetentionDistribution {
            weak_fraction: 0.2,
            ..Default::default()
        };
        let vrt = vrt_on(0.1, 0.2);
        let dpd = DpdModel {
            enabled: true,
            ..Default::default()
        };
        let gt = RetentionGroundTruth::generate(&small_device(300), &dist, &vrt, &dpd, 11).unwrap();
        for row in (0..300u64).rev() {
            let (base, pattern, has) = generate_row(11, row, &dist, &vrt, &dpd);
            assert_eq!(base, gt.base_retention_ms(row));
            assert_eq!(pattern, gt.dpd_worst_pattern(row));
            assert_eq!(has, gt.has_vrt(row));
        }
    }

    #[test]
    fn true_retention_respects_global_floor() {
        let dist = RetentionDistribution {
            weak_fraction: 0.5,
            ..Default::default()
        };
        let vrt = vrt_on(0.5, 0.5);
        let dpd = DpdModel {
            enabled: true,
            num_patterns: 4,
            worst_pattern_factor: 0.7,
        };
        let mut gt = RetentionGroundTruth::generate(&small_device(500), &dist, &vrt, &dpd, 8).unwrap();
        let floor = 64.0 * 0.5 * 0.7;
        for w in 1..30 {
            gt.step_vrt(w).unwrap();
            for row in 0..500 {
                assert!(gt.true_min_retention(row, w).unwrap() >= floor);
            }
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let gt = RetentionGroundTruth::generate(
            &small_device(3),
            &RetentionDistribution::default(),
            &VrtModel::default(),
            &DpdModel::default(),
            1,
        )
        .unwrap();
        let csv = gt.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "row_index,base_retention_ms,has_vrt,dpd_worst_pattern");
        assert_eq!(lines.len(), 4);
    }
}
