//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error (including unbinnable
//! rows), 3 invariant violation, 4 I/O error.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{csv_comment, ConfigMap, ExperimentSpec};
use crate::error::Error;
use crate::overhead::{self, density_sweep, OverheadInputs, Policy};
use crate::profiler;
use crate::raidr::{self, bin_summary_csv};
use crate::retention::{RetentionGroundTruth, GIBIBIT};
use crate::selftest::{self, Fault};
use crate::simulate::{self, SimReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "raidr", version, about = "Retention-aware multi-rate DRAM refresh simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the closed-loop simulation for every configured seed.
    Simulate(CommonArgs),
    /// Run one simulation per value of a configuration key.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Configuration key to vary; `density` is short for device.density_bits.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// A single value; repeat for values that contain commas.
        #[arg(long = "value")]
        value: Vec<String>,
    },
    /// Generate ground truth, profile it and assign bins.
    Profile {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write ground_truth.csv.
        #[arg(long)]
        dump_ground_truth: bool,
    },
    /// Analytic refresh overhead over the configured densities.
    Overhead(CommonArgs),
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (experiment.out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single master seed (experiment.seeds).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidParams(_)
            | Error::InvalidConfig { .. }
            | Error::Unsatisfiable(_)
            | Error::UnbinnableRow { .. } => EXIT_CONFIG,
            Error::VersionMismatch { .. } | Error::CorruptCheckpoint(_) | Error::Snapshot(_) => EXIT_IO,
            Error::RowOutOfRange { .. } | Error::OutOfOrderStep { .. } => EXIT_INVARIANT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| io_error(Path::new("<stdout>"), e))
}

/// Read the config file, then apply overrides and flags.
pub fn load_config(args: &CommonArgs) -> CliResult<ConfigMap> {
    let mut map = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            ConfigMap::parse_str(&text)?
        }
        None => ConfigMap::default(),
    };
    for assignment in &args.set {
        map.apply_override(assignment)?;
    }
    if let Some(seed) = args.seed {
        map.set("experiment.seeds", &seed.to_string())?;
    }
    if let Some(out) = &args.out {
        map.set("experiment.out_dir", &out.to_string_lossy())?;
    }
    Ok(map)
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError {
            code: EXIT_CONFIG,
            message: "--jobs must be positive".into(),
        }),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError {
                    code: EXIT_INVARIANT,
                    message: e.to_string(),
                })?;
            Ok(pool.install(f))
        }
    }
}

fn seeds_label(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

/// Directory for one seed's artifacts.
fn seed_dir(base: &Path, spec: &ExperimentSpec, seed: u64) -> PathBuf {
    if spec.seeds.len() == 1 {
        base.to_path_buf()
    } else {
        base.join(format!("seed-{seed}"))
    }
}

pub const SUMMARY_HEADER: &str = "scenario,seed,num_rows,windows,refreshes_issued,refreshes_baseline_equiv,\
savings_fraction,retention_failures,unsafe_rows,fpr_extra_refreshes,controller_storage_bits,invariant_violations";

fn summary_fields(name: &str, r: &SimReport) -> String {
    format!(
        "{name},{},{},{},{},{},{},{},{},{},{},{}",
        r.seed,
        r.num_rows,
        r.windows_simulated,
        r.refreshes_issued,
        r.refreshes_baseline_equiv,
        r.savings_fraction,
        r.retention_failures,
        r.unsafe_rows,
        r.fpr_extra_refreshes,
        r.controller_storage_bits,
        r.invariant_violations().len()
    )
}

fn overhead_inputs(spec: &ExperimentSpec) -> OverheadInputs {
    OverheadInputs {
        device: spec.scenario.device.clone(),
        energy: spec.energy,
    }
}

/// Simulate every seed of `spec`, writing per-seed artifacts under `base`.
fn simulate_seeds(spec: &ExperimentSpec, base: &Path) -> CliResult<Vec<SimReport>> {
    let mut reports = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let report = simulate::run(&spec.scenario_for_seed(seed))?;
        let dir = seed_dir(base, spec, seed);
        let comment = csv_comment(&spec.config_hash, seed);
        write_file(&dir.join("simreport.txt"), &report.to_kv())?;
        write_file(
            &dir.join("bins.csv"),
            &format!("{comment}{}", bin_summary_csv(&report.bins)),
        )?;
        let overhead = density_sweep(
            &overhead_inputs(spec),
            &[spec.scenario.device.density_bits],
            &[
                Policy::Baseline,
                Policy::Raidr {
                    savings: report.savings_fraction,
                },
            ],
        )?;
        write_file(&dir.join("overhead.csv"), &format!("{comment}{}", overhead.to_csv()))?;
        reports.push(report);
    }
    Ok(reports)
}

fn report_lines(name: &str, reports: &[SimReport]) -> (String, Vec<String>) {
    let mut text = String::new();
    let mut violations = Vec::new();
    for r in reports {
        let _ = writeln!(
            text,
            "{name} seed={} rows={} windows={} savings_fraction={:.4} retention_failures={} unsafe_rows={} fpr_extra_refreshes={} storage_bits={} ({:.1} ms)",
            r.seed,
            r.num_rows,
            r.windows_simulated,
            r.savings_fraction,
            r.retention_failures,
            r.unsafe_rows,
            r.fpr_extra_refreshes,
            r.controller_storage_bits,
            r.wall_time.0.as_secs_f64() * 1e3
        );
        for v in r.invariant_violations() {
            violations.push(format!("seed {}: {v}", r.seed));
        }
    }
    (text, violations)
}

fn finish(out: &mut dyn Write, violations: &[String]) -> CliResult<i32> {
    if violations.is_empty() {
        emit(out, "invariants: ok\n")?;
        return Ok(EXIT_OK);
    }
    let mut text = String::new();
    for v in violations {
        let _ = writeln!(text, "invariant violated: {v}");
    }
    emit(out, &text)?;
    Ok(EXIT_INVARIANT)
}

pub fn cmd_simulate(args: &CommonArgs, out: &mut dyn Write) -> CliResult<i32> {
    let spec = load_config(args)?.build()?;
    let reports = with_pool(args.jobs, || simulate_seeds(&spec, &spec.out_dir))??;
    let mut summary = csv_comment(&spec.config_hash, seeds_label(&spec.seeds));
    summary.push_str(SUMMARY_HEADER);
    summary.push('\n');
    for r in &reports {
        let _ = writeln!(summary, "{}", summary_fields(&spec.name, r));
    }
    write_file(&spec.out_dir.join("summary.csv"), &summary)?;
    let (text, violations) = report_lines(&spec.name, &reports);
    emit(out, &text)?;
    finish(out, &violations)
}

fn resolve_axis(axis: &str, value: &str) -> (String, String) {
    match axis {
        // Bare numbers on the density axis are Gb.
        "density" if !value.is_empty() && value.bytes().all(|b| b.is_ascii_digit()) => {
            ("device.density_bits".into(), format!("{value}Gb"))
        }
        "density" => ("device.density_bits".into(), value.into()),
        _ => (axis.into(), value.into()),
    }
}

pub fn cmd_sweep(args: &CommonArgs, axis: &str, values: &[String], out: &mut dyn Write) -> CliResult<i32> {
    if values.is_empty() {
        return Err(CliError {
            code: EXIT_CONFIG,
            message: "sweep needs at least one value".into(),
        });
    }
    let base = load_config(args)?;
    // Build every point first so a bad value fails before any simulation.
    let mut points = Vec::with_capacity(values.len());
    for value in values {
        let (key, resolved) = resolve_axis(axis, value);
        let mut map = base.clone();
        map.set(&key, &resolved)?;
        points.push((key, resolved, map.build()?));
    }
    let out_dir = base.build()?.out_dir;
    let results = with_pool(args.jobs, || {
        points
            .par_iter()
            .enumerate()
            .map(|(i, (_, _, spec))| simulate_seeds(spec, &out_dir.join(format!("point-{i}"))))
            .collect::<Vec<_>>()
    })?;

    let mut csv = csv_comment(&base.hash(), seeds_label(&points[0].2.seeds));
    let _ = writeln!(
        csv,
        "axis,value,{SUMMARY_HEADER},throughput_loss_baseline,throughput_loss_raidr,refresh_energy_fraction_baseline,refresh_energy_fraction_raidr"
    );
    let mut text = String::new();
    let mut violations = Vec::new();
    for ((key, value, spec), result) in points.iter().zip(results) {
        let reports = result?;
        let inputs = overhead_inputs(spec);
        for r in &reports {
            let raidr = Policy::Raidr {
                savings: r.savings_fraction,
            };
            let _ = writeln!(
                csv,
                "{key},{},{},{},{},{},{}",
                csv_field(value),
                summary_fields(&spec.name, r),
                overhead::throughput_loss(&inputs, Policy::Baseline)?.value,
                overhead::throughput_loss(&inputs, raidr)?.value,
                overhead::energy_fraction(&inputs, Policy::Baseline)?.value,
                overhead::energy_fraction(&inputs, raidr)?.value,
            );
        }
        let (t, v) = report_lines(&format!("{key}={value}"), &reports);
        text.push_str(&t);
        violations.extend(v.into_iter().map(|v| format!("{key}={value} {v}")));
    }
    write_file(&out_dir.join("sweep.csv"), &csv)?;
    emit(out, &text)?;
    finish(out, &violations)
}

fn csv_field(value: &str) -> String {
    if value.contains(',') || value.contains('"') {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

pub fn cmd_profile(args: &CommonArgs, dump_ground_truth: bool, out: &mut dyn Write) -> CliResult<i32> {
    let spec = load_config(args)?.build()?;
    let mut first_error = None;
    for &seed in &spec.seeds {
        let s = spec.scenario_for_seed(seed);
        let gt = RetentionGroundTruth::generate(&s.device, &s.retention, &s.vrt, &s.dpd, seed)?;
        let profile = profiler::profile(&gt, &s.profiler, seed)?;
        let dir = seed_dir(&spec.out_dir, &spec, seed);
        let comment = csv_comment(&spec.config_hash, seed);
        if dump_ground_truth {
            write_file(&dir.join("ground_truth.csv"), &format!("{comment}{}", gt.to_csv()))?;
        }
        match raidr::assign_bins(&profile, &s.bins) {
            Ok(assigned) => {
                write_file(
                    &dir.join("profile.csv"),
                    &format!("{comment}{}", profile.to_csv(Some(&assigned))),
                )?;
                let mis = profiler::misclassification_report(&profile, &gt, &s.bins)?;
                let mut counts = vec![0u64; s.bins.default_bin() + 1];
                for &b in &assigned {
                    counts[b as usize] += 1;
                }
                emit(
                    out,
                    &format!(
                        "seed={seed} mode={} rows_per_bin={:?} unsafe_rows={} wasteful_rows={} exact_rows={}\n",
                        profile.mode.as_str(),
                        counts,
                        mis.unsafe_rows,
                        mis.wasteful_rows,
                        mis.exact_rows
                    ),
                )?;
            }
            Err(e) => {
                write_file(&dir.join("profile.csv"), &format!("{comment}{}", profile.to_csv(None)))?;
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(EXIT_OK),
    }
}

/// Baseline throughput loss band expected of a 64 Gb chip.
pub const LOSS_BAND_64GB: (f64, f64) = (0.35, 0.55);

pub fn cmd_overhead(args: &CommonArgs, out: &mut dyn Write) -> CliResult<i32> {
    let spec = load_config(args)?.build()?;
    let report = density_sweep(
        &overhead_inputs(&spec),
        &spec.overhead_densities,
        &[
            Policy::Baseline,
            Policy::Raidr {
                savings: spec.overhead_savings,
            },
        ],
    )?;
    let seed = seeds_label(&spec.seeds);
    write_file(
        &spec.out_dir.join("overhead.csv"),
        &format!("{}{}", csv_comment(&spec.config_hash, &seed), report.to_csv()),
    )?;

    let mut text = String::from("density    policy    throughput_loss  refresh_energy_fraction  tRFC_ns\n");
    for p in &report.points {
        let _ = writeln!(
            text,
            "{:>6.1}Gb  {:<8}  {:>15.4}  {:>23.4}  {:>7.1}",
            p.density_bits as f64 / GIBIBIT as f64,
            p.policy.name(),
            p.throughput_loss,
            p.refresh_energy_fraction,
            p.trfc_ns_used
        );
    }
    let device = &spec.scenario.device;
    let _ = writeln!(
        text,
        "calibration: {} refresh commands per {} ms window, tRFC anchor {:.0} Gb, {} nJ/Gb per command",
        device.refresh_cmds_per_window,
        device.trefw_ms,
        device.trfc_anchor_bits as f64 / GIBIBIT as f64,
        spec.energy.refresh_nj_per_gb
    );
    if let Some(p) = report
        .series("baseline")
        .into_iter()
        .find(|p| p.density_bits == 64 * GIBIBIT)
    {
        let (lo, hi) = LOSS_BAND_64GB;
        let verdict = if (lo..=hi).contains(&p.throughput_loss) {
            "PASS"
        } else {
            "FAIL"
        };
        let _ = writeln!(
            text,
            "band check: 64 Gb baseline throughput loss {:.3} in [{lo}, {hi}]: {verdict} (calibrated band, not a reproduction of any published curve)",
            p.throughput_loss
        );
    }
    if report.clamp_events() > 0 {
        let _ = writeln!(text, "note: {} points clamped to [0, 1]", report.clamp_events());
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_selftest(inject_fault: Option<&str>, out: &mut dyn Write) -> CliResult<i32> {
    let fault = inject_fault
        .map(str::parse::<Fault>)
        .transpose()
        .map_err(|message| CliError {
            code: EXIT_CONFIG,
            message,
        })?;
    let checks = selftest::run(fault);
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(text, "{c}");
    }
    emit(out, &text)?;
    match checks.iter().find(|c| !c.passed) {
        Some(c) => {
            emit(out, &format!("selftest failed: {}\n", c.property))?;
            Ok(EXIT_INVARIANT)
        }
        None => Ok(EXIT_OK),
    }
}

/// Dispatch a parsed command line. Errors are written to `err`.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args, out),
        Command::Sweep {
            common,
            axis,
            values,
            value,
        } => {
            let all: Vec<String> = values.iter().chain(value).cloned().collect();
            cmd_sweep(common, axis, &all, out)
        }
        Command::Profile {
            common,
            dump_ground_truth,
        } => cmd_profile(common, *dump_ground_truth, out),
        Command::Overhead(args) => cmd_overhead(args, out),
        Command::Selftest { inject_fault } => cmd_selftest(inject_fault.as_deref(), out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

/// Parse `args` (including the program name) and run.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli, out, err),
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                EXIT_CONFIG
            } else {
                let _ = write!(out, "{e}");
                EXIT_OK
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::config("bloom.m_bits", "x")).code, EXIT_CONFIG);
        assert_eq!(CliError::from(Error::CorruptCheckpoint("x".into())).code, EXIT_IO);
        assert_eq!(
            CliError::from(Error::UnbinnableRow {
                row: 1,
                observed_ms: 1.0,
                base_ms: 64.0
            })
            .code,
            EXIT_CONFIG
        );
    }

    #[test]
    fn density_alias() {
        assert_eq!(
            resolve_axis("density", "8"),
            ("device.density_bits".into(), "8Gb".into())
        );
        assert_eq!(
            resolve_axis("density", "512Mb"),
            ("device.density_bits".into(), "512Mb".into())
        );
        assert_eq!(
            resolve_axis("vrt.low_factor", "0.5"),
            ("vrt.low_factor".into(), "0.5".into())
        );
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("128,256"), "\"128,256\"");
        assert_eq!(csv_field("0.5"), "0.5");
    }
}
