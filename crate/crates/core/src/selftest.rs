//! Built-in invariant checks, run by `raidr selftest`.

use std::fmt;
use std::str::FromStr;

use crate::bloom::{self, BloomFilter, BloomParams};
use crate::overhead::{density_sweep, EnergyModel, OverheadInputs, Policy};
use crate::retention::{DeviceConfig, DpdModel, RetentionDistribution, VrtModel, GIBIBIT};
use crate::simulate::{self, Scenario, SimConfig, Simulation};

/// A deliberate defect, used to show the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Clear one bit of an inserted key.
    NoFalseNegatives,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "no-false-negatives" => Ok(Fault::NoFalseNegatives),
            _ => Err(format!("unknown fault `{s}` (known: no-false-negatives)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub property: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.property, self.detail)
    }
}

fn check(property: &'static str, passed: bool, detail: String) -> Check {
    Check {
        property,
        passed,
        detail,
    }
}

/// Run every check. Deterministic.
pub fn run(fault: Option<Fault>) -> Vec<Check> {
    vec![
        no_false_negatives(fault),
        fpr_calibration(),
        snapshot_round_trip(),
        oracle_safety(),
        savings_bound(),
        checkpoint_identity(),
        overhead_monotone(),
    ]
}

fn no_false_negatives(fault: Option<Fault>) -> Check {
    let n = 10_000u64;
    let result = bloom::plan(1e-3, n).and_then(|p| BloomFilter::new(p.with_seed(7)));
    let mut filter = match result {
        Ok(f) => f,
        Err(e) => return check("bloom.no_false_negatives", false, e.to_string()),
    };
    for key in 0..n {
        filter.insert(key * 2654435761);
    }
    if fault == Some(Fault::NoFalseNegatives) {
        let first = filter.probes(0).next().unwrap();
        filter.clear_bit_for_fault_injection(first);
    }
    let missing = (0..n).filter(|&key| !filter.contains(key * 2654435761)).count();
    check(
        "bloom.no_false_negatives",
        missing == 0,
        format!("{missing} of {n} inserted keys missing"),
    )
}

fn fpr_calibration() -> Check {
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (k, fill) in [(2u32, 1.0f64), (4, 0.5)] {
        let m = 1u64 << 16;
        let n = (fill * m as f64 / f64::from(k)) as u64;
        let params = BloomParams::new(m, k, 11).unwrap();
        let mut filter = BloomFilter::new(params).unwrap();
        for key in 0..n {
            filter.insert(key);
        }
        let probes = 200_000u64;
        let hits = (n..n + probes).filter(|&key| filter.contains(key)).count();
        let measured = hits as f64 / probes as f64;
        let analytic = bloom::fpr_analytic(&params, n);
        let rel = (measured - analytic).abs() / analytic;
        worst = worst.max(rel);
        detail.push(format!("k={k} fill={fill}: {measured:.5} vs {analytic:.5}"));
    }
    check("bloom.fpr_calibration", worst <= 0.2, detail.join("; "))
}

fn snapshot_round_trip() -> Check {
    let mut filter = BloomFilter::new(BloomParams::new(1000, 3, 5).unwrap()).unwrap();
    for key in 0..100 {
        filter.insert(key);
    }
    let ok = BloomFilter::from_snapshot(&filter.to_snapshot()).as_ref() == Ok(&filter);
    check("bloom.snapshot_round_trip", ok, "1000-bit filter".into())
}

fn noisy(seed: u64) -> Scenario {
    Scenario {
        device: DeviceConfig::with_rows(4000),
        retention: RetentionDistribution {
            weak_fraction: 0.05,
            floor_ms: 128.0,
            ..Default::default()
        },
        vrt: VrtModel {
            enabled: true,
            affected_fraction: 0.2,
            low_factor: 0.75,
            p_high_to_low: 0.2,
            p_low_to_high: 0.2,
        },
        dpd: DpdModel {
            enabled: true,
            num_patterns: 8,
            worst_pattern_factor: 0.75,
        },
        sim: SimConfig {
            horizon_windows: 256,
            seed,
        },
        ..Default::default()
    }
}

fn oracle_safety() -> Check {
    let mut failures = 0;
    for seed in 1..=5 {
        match simulate::run(&noisy(seed)) {
            Ok(r) => failures += r.retention_failures,
            Err(e) => return check("sim.oracle_safety", false, e.to_string()),
        }
    }
    check(
        "sim.oracle_safety",
        failures == 0,
        format!("{failures} failures over 5 seeds with VRT and DPD"),
    )
}

fn savings_bound() -> Check {
    let mut strong = Scenario {
        device: DeviceConfig::with_rows(10_000),
        ..Default::default()
    };
    strong.retention.weak_fraction = 0.0;
    let weak = Scenario {
        device: DeviceConfig::with_rows(10_000),
        ..Default::default()
    };
    match (simulate::run(&strong), simulate::run(&weak)) {
        (Ok(s), Ok(w)) => check(
            "sim.savings_bound",
            s.savings_fraction == 0.75 && w.savings_fraction < 0.75,
            format!(
                "all strong {} (bound 0.75), default population {}",
                s.savings_fraction, w.savings_fraction
            ),
        ),
        (Err(e), _) | (_, Err(e)) => check("sim.savings_bound", false, e.to_string()),
    }
}

fn checkpoint_identity() -> Check {
    let s = noisy(9);
    let outcome = (|| {
        let straight = simulate::run(&s)?;
        let mut sim = Simulation::new(&s)?;
        sim.advance(100);
        let mut resumed = Simulation::restore(&s, &sim.checkpoint())?;
        resumed.run_to_horizon();
        Ok::<_, crate::Error>(resumed.report()? == straight)
    })();
    match outcome {
        Ok(same) => check("sim.checkpoint_identity", same, "resume at window 100 of 256".into()),
        Err(e) => check("sim.checkpoint_identity", false, e.to_string()),
    }
}

fn overhead_monotone() -> Check {
    let inputs = OverheadInputs {
        device: DeviceConfig::default(),
        energy: EnergyModel::default(),
    };
    let densities: Vec<u64> = [1, 2, 4, 8, 16, 32, 64, 128].iter().map(|g| g * GIBIBIT).collect();
    match density_sweep(&inputs, &densities, &[Policy::Baseline]) {
        Ok(report) => {
            let ok = report
                .points
                .windows(2)
                .all(|w| w[1].throughput_loss >= w[0].throughput_loss);
            check(
                "overhead.monotone_density",
                ok,
                "baseline loss non-decreasing over 1..128 Gb".into(),
            )
        }
        Err(e) => check("overhead.monotone_density", false, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        for c in run(None) {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let checks = run(Some(Fault::NoFalseNegatives));
        let first = checks.iter().find(|c| !c.passed).unwrap();
        assert_eq!(first.property, "bloom.no_false_negatives");
    }

    #[test]
    fn fault_names() {
        assert_eq!("no-false-negatives".parse::<Fault>(), Ok(Fault::NoFalseNegatives));
        assert!("other".parse::<Fault>().is_err());
    }
}
