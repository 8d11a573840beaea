//! Analytic refresh overhead as a function of chip density.
//!
//! Throughput loss is the fraction of each retention window the device
//! spends busy with refresh commands:
//!
//! ```text
//! loss = refresh_cmds_per_window * tRFC(density) / tREFW
//! ```
//!
//! Energy is split into refresh, background and activity components over
//! one window, with per-command refresh energy linear in density. Under the
//! multi-rate policy both the busy time and the refresh energy scale by
//! `1 - savings`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::retention::{DeviceConfig, GIBIBIT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    /// Per-command refresh energy slope (nJ per Gb of density).
    pub refresh_nj_per_gb: f64,
    /// Per-command refresh energy intercept (nJ).
    pub refresh_nj_base: f64,
    pub background_mw: f64,
    /// Power of non-refresh work.
    pub activity_mw: f64,
}

impl Default for EnergyModel {
    /// Calibrated so a 64 Gb chip spends ~45% of its energy on refresh.
    fn default() -> Self {
        Self {
            refresh_nj_per_gb: 10.0,
            refresh_nj_base: 0.0,
            background_mw: 60.0,
            activity_mw: 40.0,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.refresh_nj_per_gb >= 0.0 && self.refresh_nj_per_gb.is_finite()) {
            return Err(Error::config("overhead.refresh_nj_per_gb", "must be non-negative"));
        }
        if !(self.refresh_nj_base >= 0.0 && self.refresh_nj_base.is_finite()) {
            return Err(Error::config("overhead.refresh_nj_base", "must be non-negative"));
        }
        if !(self.background_mw > 0.0 && self.background_mw.is_finite()) {
            return Err(Error::config("overhead.background_mw", "must be positive"));
        }
        if !(self.activity_mw > 0.0 && self.activity_mw.is_finite()) {
            return Err(Error::config("overhead.activity_mw", "must be positive"));
        }
        Ok(())
    }

    pub fn refresh_cmd_nj(&self, density_bits: u64) -> f64 {
        self.refresh_nj_base + self.refresh_nj_per_gb * density_bits as f64 / GIBIBIT as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadInputs {
    pub device: DeviceConfig,
    pub energy: EnergyModel,
}

impl OverheadInputs {
    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.energy.validate()
    }

    fn at_density(&self, density_bits: u64) -> Self {
        let mut copy = self.clone();
        copy.device.density_bits = density_bits;
        copy
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Baseline,
    Raidr { savings: f64 },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::Raidr { .. } => "raidr",
        }
    }

    pub fn savings(&self) -> f64 {
        match self {
            Policy::Baseline => 0.0,
            Policy::Raidr { savings } => *savings,
        }
    }

    fn validate(&self) -> Result<()> {
        let s = self.savings();
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidParams(format!("savings fraction {s} outside [0, 1]")));
        }
        Ok(())
    }
}

/// A fraction clamped into `[0, 1]`, remembering whether clamping happened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fraction {
    pub value: f64,
    pub clamped: bool,
}

fn clamp_fraction(raw: f64, what: &str, density_bits: u64) -> Fraction {
    let value = raw.clamp(0.0, 1.0);
    let clamped = value != raw;
    if clamped {
        log::warn!(
            "{what} of {raw:.4} at {:.1} Gb clamped to {value}",
            density_bits as f64 / GIBIBIT as f64
        );
    }
    Fraction { value, clamped }
}

/// Fraction of device time spent on refresh at the device's density.
pub fn throughput_loss(inputs: &OverheadInputs, policy: Policy) -> Result<Fraction> {
    policy.validate()?;
    let device = &inputs.device;
    let busy_ns = f64::from(device.refresh_cmds_per_window) * device.trfc_ns(device.density_bits);
    let baseline = busy_ns / (device.trefw_ms * 1e6);
    Ok(clamp_fraction(
        baseline * (1.0 - policy.savings()),
        "throughput loss",
        device.density_bits,
    ))
}

/// Share of total energy per window spent on refresh.
pub fn energy_fraction(inputs: &OverheadInputs, policy: Policy) -> Result<Fraction> {
    policy.validate()?;
    let device = &inputs.device;
    let refresh_nj = f64::from(device.refresh_cmds_per_window)
        * inputs.energy.refresh_cmd_nj(device.density_bits)
        * (1.0 - policy.savings());
    // mW * ms = uJ = 1e3 nJ
    let background_nj = inputs.energy.background_mw * device.trefw_ms * 1e3;
    let activity_nj = inputs.energy.activity_mw * device.trefw_ms * 1e3;
    let total = refresh_nj + background_nj + activity_nj;
    let raw = if total > 0.0 { refresh_nj / total } else { 0.0 };
    Ok(clamp_fraction(raw, "refresh energy fraction", device.density_bits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadPoint {
    pub density_bits: u64,
    pub policy: Policy,
    pub throughput_loss: f64,
    pub refresh_energy_fraction: f64,
    pub trfc_ns_used: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OverheadReport {
    pub points: Vec<OverheadPoint>,
}

impl OverheadReport {
    pub fn clamp_events(&self) -> usize {
        self.points.iter().filter(|p| p.clamped).count()
    }

    pub fn series(&self, policy_name: &str) -> Vec<&OverheadPoint> {
        self.points.iter().filter(|p| p.policy.name() == policy_name).collect()
    }

    /// `density_bits,policy,savings,throughput_loss,refresh_energy_fraction,trfc_ns_used`
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p.density_bits,
                p.policy.name(),
                p.policy.savings(),
                p.throughput_loss,
                p.refresh_energy_fraction,
                p.trfc_ns_used
            );
        }
        out
    }
}

pub const SWEEP_HEADER: &str = "density_bits,policy,savings,throughput_loss,refresh_energy_fraction,trfc_ns_used";

/// One point per `(density, policy)`, densities in the given order.
pub fn density_sweep(inputs: &OverheadInputs, densities: &[u64], policies: &[Policy]) -> Result<OverheadReport> {
    inputs.energy.validate()?;
    if densities.contains(&0) {
        return Err(Error::InvalidParams("densities must be positive".into()));
    }
    if densities.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParams("densities must be sorted ascending".into()));
    }
    let mut points = Vec::with_capacity(densities.len() * policies.len());
    for &density in densities {
        let at = inputs.at_density(density);
        for &policy in policies {
            let loss = throughput_loss(&at, policy)?;
            let energy = energy_fraction(&at, policy)?;
            points.push(OverheadPoint {
                density_bits: density,
                policy,
                throughput_loss: loss.value,
                refresh_energy_fraction: energy.value,
                trfc_ns_used: at.device.trfc_ns(density),
                clamped: loss.clamped || energy.clamped,
            });
        }
    }
    Ok(OverheadReport { points })
}
