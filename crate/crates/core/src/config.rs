//! Flat `key = value` experiment configuration.
//!
//! Every key has a default. Files and `--set` overrides may only name keys
//! from [`KEYS`]; anything else is rejected before any work is done. Blank
//! lines and lines starting with `#` are ignored.
//!
//! Sizes accept `Kb`, `Mb` and `Gb` suffixes (binary multiples of bits).
//! Lists are comma separated.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::overhead::EnergyModel;
use crate::profiler::{ProfileMode, ProfilerConfig};
use crate::raidr::{BinConfig, FilterSizing};
use crate::retention::{DeviceConfig, DpdModel, RetentionDistribution, TrfcEntry, VrtModel, WeakLaw, GIBIBIT};
use crate::simulate::{Scenario, SimConfig};

/// `(key, default, description)` in canonical order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("experiment.name", "default", "scenario label"),
    ("experiment.seeds", "1", "master seeds, one run per seed"),
    ("experiment.out_dir", "out", "artifact directory"),
    ("sim.horizon_windows", "1024", "base windows to simulate"),
    ("device.density_bits", "64Gb", "chip density"),
    ("device.row_size_bits", "65536", "bits per row"),
    (
        "device.trefw_ms",
        "64",
        "base retention window; also the shortest bin interval",
    ),
    (
        "device.refresh_cmds_per_window",
        "8192",
        "refresh commands per base window",
    ),
    ("device.banks", "8", "banks"),
    (
        "device.trfc_table",
        "1Gb:110,2Gb:160,4Gb:260,8Gb:350",
        "density:tRFC_ns entries",
    ),
    (
        "device.trfc_anchor",
        "4Gb",
        "table entry scaled proportionally above the table",
    ),
    ("retention.weak_fraction", "0.001", "probability a row is weak"),
    ("retention.weak_law", "uniform", "uniform | point | lognormal"),
    ("retention.floor_ms", "64", "smallest weak retention"),
    ("retention.weak_ceiling_ms", "256", "upper edge of the weak population"),
    ("retention.strong_value_ms", "2560", "retention of strong rows"),
    ("retention.point_ms", "100", "weak retention for the point law"),
    ("retention.lognormal_median_ms", "1000", "median for the lognormal law"),
    (
        "retention.lognormal_sigma",
        "1",
        "log-space sigma for the lognormal law",
    ),
    ("vrt.enabled", "false", "variable retention time"),
    ("vrt.affected_fraction", "0.01", "probability a row has VRT"),
    ("vrt.low_factor", "0.5", "retention multiplier in the low state"),
    ("vrt.p_high_to_low", "0.05", "per-window transition probability"),
    ("vrt.p_low_to_high", "0.2", "per-window transition probability"),
    ("dpd.enabled", "false", "data pattern dependence"),
    ("dpd.num_patterns", "8", "patterns per row"),
    (
        "dpd.worst_pattern_factor",
        "0.5",
        "retention multiplier under the worst pattern",
    ),
    ("profiler.mode", "oracle", "oracle | measured"),
    (
        "profiler.patterns_tested",
        "1",
        "patterns exercised per row when measuring",
    ),
    ("profiler.rounds", "1", "profiling rounds"),
    (
        "profiler.guard_band_factor",
        "1",
        "measured retention is divided by this",
    ),
    ("profiler.window_span", "1", "windows spanned by the profiling rounds"),
    (
        "bins.thresholds_ms",
        "128,256",
        "bin upper edges; the last starts the default bin",
    ),
    ("bloom.target_fpr", "0.001", "per-filter false positive target"),
    ("bloom.m_bits", "auto", "explicit filter size; needs bloom.k"),
    ("bloom.k", "auto", "explicit hash count; needs bloom.m_bits"),
    (
        "overhead.densities",
        "8Gb,16Gb,32Gb,64Gb",
        "densities for the overhead sweep",
    ),
    ("overhead.savings", "0.75", "savings fraction for the raidr series"),
    ("overhead.refresh_nj_per_gb", "10", "per-command refresh energy slope"),
    ("overhead.refresh_nj_base", "0", "per-command refresh energy intercept"),
    ("overhead.background_mw", "60", "background power"),
    ("overhead.activity_mw", "40", "non-refresh work power"),
];

fn key_index(key: &str) -> Option<usize> {
    KEYS.iter().position(|(k, _, _)| *k == key)
}

/// Raw key-value configuration, one value per entry of [`KEYS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMap {
    values: Vec<String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(_, v, _)| v.to_string()).collect(),
        }
    }
}

impl ConfigMap {
    /// Defaults overlaid with the given file contents.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut map = Self::default();
        let mut seen = vec![false; KEYS.len()];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    &format!("line {}", n + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let key = key.trim();
            let idx = key_index(key).ok_or_else(|| Error::config(key, "unknown key"))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::config(key, "set more than once"));
            }
            map.values[idx] = value.trim().to_string();
        }
        Ok(map)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        key_index(key).map(|i| self.values[i].as_str())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let idx = key_index(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        self.values[idx] = value.trim().to_string();
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment.trim(), "override must look like key=value"))?;
        self.set(key.trim(), value)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> {
        KEYS.iter().zip(&self.values).map(|((k, _, _), v)| (*k, v.as_str()))
    }

    /// Canonical rendering: every key, in [`KEYS`] order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical rendering without `experiment.out_dir`,
    /// so the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.entries().filter(|(k, _)| *k != "experiment.out_dir") {
            hasher.update(format!("{k} = {v}\n").as_bytes());
        }
        hex(&hasher.finalize())
    }

    pub fn build(&self) -> Result<ExperimentSpec> {
        let v = |key: &str| self.get(key).expect("known key");
        let f = |key: &str| parse_f64(key, v(key));

        let seeds = parse_list(v("experiment.seeds"))
            .map(|s| parse_u64("experiment.seeds", s))
            .collect::<Result<Vec<_>>>()?;
        if seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "needs at least one seed"));
        }
        let name = v("experiment.name").to_string();
        if name.is_empty() {
            return Err(Error::config("experiment.name", "must not be empty"));
        }

        let device = DeviceConfig {
            density_bits: parse_size("device.density_bits", v("device.density_bits"))?,
            row_size_bits: parse_size("device.row_size_bits", v("device.row_size_bits"))?,
            trefw_ms: f("device.trefw_ms")?,
            refresh_cmds_per_window: parse_u32("device.refresh_cmds_per_window", v("device.refresh_cmds_per_window"))?,
            trfc_table: parse_trfc_table(v("device.trfc_table"))?,
            trfc_anchor_bits: parse_size("device.trfc_anchor", v("device.trfc_anchor"))?,
            banks: parse_u32("device.banks", v("device.banks"))?,
        };

        let weak_law = match v("retention.weak_law") {
            "uniform" => WeakLaw::Uniform,
            "point" => WeakLaw::PointMass {
                ms: f("retention.point_ms")?,
            },
            "lognormal" => WeakLaw::LogNormalTail {
                median_ms: f("retention.lognormal_median_ms")?,
                sigma: f("retention.lognormal_sigma")?,
            },
            other => {
                return Err(Error::config(
                    "retention.weak_law",
                    format!("expected uniform, point or lognormal, got `{other}`"),
                ))
            }
        };
        let retention = RetentionDistribution {
            weak_fraction: f("retention.weak_fraction")?,
            weak_law,
            floor_ms: f("retention.floor_ms")?,
            weak_ceiling_ms: f("retention.weak_ceiling_ms")?,
            strong_value_ms: f("retention.strong_value_ms")?,
        };

        let vrt = VrtModel {
            enabled: parse_bool("vrt.enabled", v("vrt.enabled"))?,
            affected_fraction: f("vrt.affected_fraction")?,
            low_factor: f("vrt.low_factor")?,
            p_high_to_low: f("vrt.p_high_to_low")?,
            p_low_to_high: f("vrt.p_low_to_high")?,
        };
        let dpd = DpdModel {
            enabled: parse_bool("dpd.enabled", v("dpd.enabled"))?,
            num_patterns: parse_u32("dpd.num_patterns", v("dpd.num_patterns"))?,
            worst_pattern_factor: f("dpd.worst_pattern_factor")?,
        };

        let mode = match v("profiler.mode") {
            "oracle" => ProfileMode::Oracle,
            "measured" => ProfileMode::Measured,
            other => {
                return Err(Error::config(
                    "profiler.mode",
                    format!("expected oracle or measured, got `{other}`"),
                ))
            }
        };
        let profiler = ProfilerConfig {
            mode,
            patterns_tested: parse_u32("profiler.patterns_tested", v("profiler.patterns_tested"))?,
            rounds: parse_u32("profiler.rounds", v("profiler.rounds"))?,
            guard_band_factor: f("profiler.guard_band_factor")?,
            profiling_window_span: parse_u64("profiler.window_span", v("profiler.window_span"))?,
        };

        let bins = BinConfig {
            thresholds_ms: parse_list(v("bins.thresholds_ms"))
                .map(|s| parse_f64("bins.thresholds_ms", s))
                .collect::<Result<Vec<_>>>()?,
            base_interval_ms: device.trefw_ms,
        };

        let bloom = match (v("bloom.m_bits"), v("bloom.k")) {
            ("auto", "auto") => FilterSizing::TargetFpr(f("bloom.target_fpr")?),
            ("auto", _) => return Err(Error::config("bloom.m_bits", "must be set when bloom.k is set")),
            (_, "auto") => return Err(Error::config("bloom.k", "must be set when bloom.m_bits is set")),
            (m, k) => FilterSizing::Explicit {
                m: parse_size("bloom.m_bits", m)?,
                k: parse_u32("bloom.k", k)?,
            },
        };

        let scenario = Scenario {
            device,
            retention,
            vrt,
            dpd,
            profiler,
            bins,
            bloom,
            sim: SimConfig {
                horizon_windows: parse_u64("sim.horizon_windows", v("sim.horizon_windows"))?,
                seed: seeds[0],
            },
        };

        let energy = EnergyModel {
            refresh_nj_per_gb: f("overhead.refresh_nj_per_gb")?,
            refresh_nj_base: f("overhead.refresh_nj_base")?,
            background_mw: f("overhead.background_mw")?,
            activity_mw: f("overhead.activity_mw")?,
        };
        let overhead_densities = parse_list(v("overhead.densities"))
            .map(|s| parse_size("overhead.densities", s))
            .collect::<Result<Vec<_>>>()?;
        if overhead_densities.is_empty() || overhead_densities.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "overhead.densities",
                "must be a non-empty increasing list",
            ));
        }
        let overhead_savings = f("overhead.savings")?;
        if !(0.0..=1.0).contains(&overhead_savings) {
            return Err(Error::config("overhead.savings", "must lie in [0, 1]"));
        }

        let spec = ExperimentSpec {
            name,
            seeds,
            out_dir: PathBuf::from(v("experiment.out_dir")),
            scenario,
            energy,
            overhead_densities,
            overhead_savings,
            config_hash: self.hash(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Typed, validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Scenario for the first seed.
    pub scenario: Scenario,
    pub energy: EnergyModel,
    pub overhead_densities: Vec<u64>,
    pub overhead_savings: f64,
    /// Hash of the raw configuration this was built from.
    pub config_hash: String,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.energy.validate()
    }

    pub fn scenario_for_seed(&self, seed: u64) -> Scenario {
        let mut s = self.scenario.clone();
        s.sim.seed = seed;
        s
    }
}

/// `# config_hash=... seed=...` line that heads every CSV artifact.
pub fn csv_comment(config_hash: &str, seed: impl std::fmt::Display) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

/// Canonical key-value view of a scenario, used for report echoes and
/// checkpoint identity.
pub fn scenario_entries(s: &Scenario) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| out.push((k.to_string(), v));
    put("sim.seed", s.sim.seed.to_string());
    put("sim.horizon_windows", s.sim.horizon_windows.to_string());
    put("device.density_bits", render_size(s.device.density_bits));
    put("device.row_size_bits", s.device.row_size_bits.to_string());
    put("device.trefw_ms", s.device.trefw_ms.to_string());
    put(
        "device.refresh_cmds_per_window",
        s.device.refresh_cmds_per_window.to_string(),
    );
    put("device.banks", s.device.banks.to_string());
    put("device.trfc_table", render_trfc_table(&s.device.trfc_table));
    put("device.trfc_anchor", render_size(s.device.trfc_anchor_bits));
    put("retention.weak_fraction", s.retention.weak_fraction.to_string());
    match s.retention.weak_law {
        WeakLaw::Uniform => put("retention.weak_law", "uniform".into()),
        WeakLaw::PointMass { ms } => {
            put("retention.weak_law", "point".into());
            put("retention.point_ms", ms.to_string());
        }
        WeakLaw::LogNormalTail { median_ms, sigma } => {
            put("retention.weak_law", "lognormal".into());
            put("retention.lognormal_median_ms", median_ms.to_string());
            put("retention.lognormal_sigma", sigma.to_string());
        }
    }
    put("retention.floor_ms", s.retention.floor_ms.to_string());
    put("retention.weak_ceiling_ms", s.retention.weak_ceiling_ms.to_string());
    put("retention.strong_value_ms", s.retention.strong_value_ms.to_string());
    put("vrt.enabled", s.vrt.enabled.to_string());
    put("vrt.affected_fraction", s.vrt.affected_fraction.to_string());
    put("vrt.low_factor", s.vrt.low_factor.to_string());
    put("vrt.p_high_to_low", s.vrt.p_high_to_low.to_string());
    put("vrt.p_low_to_high", s.vrt.p_low_to_high.to_string());
    put("dpd.enabled", s.dpd.enabled.to_string());
    put("dpd.num_patterns", s.dpd.num_patterns.to_string());
    put("dpd.worst_pattern_factor", s.dpd.worst_pattern_factor.to_string());
    put("profiler.mode", s.profiler.mode.as_str().into());
    put("profiler.patterns_tested", s.profiler.patterns_tested.to_string());
    put("profiler.rounds", s.profiler.rounds.to_string());
    put("profiler.guard_band_factor", s.profiler.guard_band_factor.to_string());
    put("profiler.window_span", s.profiler.profiling_window_span.to_string());
    put("bins.thresholds_ms", join(s.bins.thresholds_ms.iter()));
    put("bins.base_interval_ms", s.bins.base_interval_ms.to_string());
    match s.bloom {
        FilterSizing::TargetFpr(p) => put("bloom.target_fpr", p.to_string()),
        FilterSizing::Explicit { m, k } => {
            put("bloom.m_bits", m.to_string());
            put("bloom.k", k.to_string());
        }
    }
    out
}

/// Rendering of [`scenario_entries`].
pub fn render_scenario(s: &Scenario) -> String {
    let mut out = String::new();
    for (k, v) in scenario_entries(s) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn parse_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let x: f64 = value
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not a number")))?;
    if !x.is_finite() {
        return Err(Error::config(key, "must be finite"));
    }
    Ok(x)
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not a non-negative integer")))
}

fn parse_u32(key: &str, value: &str) -> Result<u32> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not a non-negative 32-bit integer")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

/// Bits, optionally with a `Kb`, `Mb` or `Gb` suffix.
pub fn parse_size(key: &str, value: &str) -> Result<u64> {
    let value = value.trim();
    let (digits, unit) = match value.find(|c: char| !c.is_ascii_digit()) {
        Some(at) => value.split_at(at),
        None => (value, ""),
    };
    let shift = match unit.to_ascii_lowercase().as_str() {
        "" => 0,
        "kb" => 10,
        "mb" => 20,
        "gb" => 30,
        _ => {
            return Err(Error::config(
                key,
                format!("`{value}` is not a size (e.g. 8Gb or 65536)"),
            ))
        }
    };
    let n: u64 = digits
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not a size (e.g. 8Gb or 65536)")))?;
    n.checked_mul(1 << shift)
        .ok_or_else(|| Error::config(key, format!("`{value}` overflows")))
}

pub fn render_size(bits: u64) -> String {
    if bits > 0 && bits.is_multiple_of(GIBIBIT) {
        format!("{}Gb", bits / GIBIBIT)
    } else if bits > 0 && bits.is_multiple_of(1 << 20) {
        format!("{}Mb", bits >> 20)
    } else {
        bits.to_string()
    }
}

fn parse_trfc_table(value: &str) -> Result<Vec<TrfcEntry>> {
    const KEY: &str = "device.trfc_table";
    parse_list(value)
        .map(|entry| {
            let (d, t) = entry
                .split_once(':')
                .ok_or_else(|| Error::config(KEY, format!("entry `{entry}` must look like 4Gb:260")))?;
            Ok(TrfcEntry {
                density_bits: parse_size(KEY, d)?,
                trfc_ns: parse_f64(KEY, t.trim())?,
            })
        })
        .collect()
}

fn render_trfc_table(table: &[TrfcEntry]) -> String {
    join(
        table
            .iter()
            .map(|e| format!("{}:{}", render_size(e.density_bits), e.trfc_ns)),
    )
}
