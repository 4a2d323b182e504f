//! Command-line surface: run studies from config files, re-validate existing
//! pulses, and export physical pulses.
//!
//! Exit codes separate engineering failures from scientific ones: 0 means
//! the run succeeded and every declared threshold was met, 2 means the run
//! succeeded but a threshold failed, and 1 means an error (bad config,
//! malformed input, solver breakdown).

use crate::bloch::{self, BlochParams};
use crate::config::{OutputFormat, RunConfig};
use crate::solver::SolveReport;
use crate::studies::{self, convergence_csv, validate_pulse, RobustnessReport, StudyName};
use crate::transcription::PulseSolution;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_THRESHOLD: i32 = 2;

#[derive(Parser)]
#[command(name = "ensemblectl", version, about = "Pseudospectral pulse design \
for inhomogeneous ensembles", long_about = None)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the study named in a TOML config and write its artifacts.
    Solve { config: PathBuf },
    /// Re-simulate a dimensionless pulse CSV over a dense (ω, ε) grid.
    Validate {
        pulse: PathBuf,
        /// Frequency half-band: ω ∈ [-B, B].
        #[arg(long = "B", default_value_t = 0.0)]
        b: f64,
        /// rf-inhomogeneity half-width: ε ∈ [1-δ, 1+δ].
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Validation lattice, ω points × ε points.
        #[arg(long, default_value = "41x9", value_parser = parse_grid)]
        grid: (usize, usize),
        /// Target state the score is measured against.
        #[arg(long, default_value = "-z", allow_hyphen_values = true)]
        target: TargetAxis,
    },
    /// Scale a dimensionless pulse CSV to physical units.
    ExportPhysical {
        pulse: PathBuf,
        /// Nominal rf amplitude in Hz.
        #[arg(long = "amp-hz")]
        amp_hz: f64,
        /// Output path; defaults to `<pulse>_physical.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the convergence sweep from a TOML config.
    Convergence { config: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetAxis {
    X,
    Y,
    Z,
    #[value(name = "-z")]
    MinusZ,
}

impl TargetAxis {
    fn vector(self) -> [f64; 3] {
        match self {
            TargetAxis::X => [1.0, 0.0, 0.0],
            TargetAxis::Y => [0.0, 1.0, 0.0],
            TargetAxis::Z => [0.0, 0.0, 1.0],
            TargetAxis::MinusZ => [0.0, 0.0, -1.0],
        }
    }
}

fn parse_grid(text: &str) -> Result<(usize, usize), String> {
    let (a, b) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected NxM, got {text:?}"))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad grid size {s:?}: {e}"))
    };
    let grid = (parse(a)?, parse(b)?);
    if grid.0 == 0 || grid.1 == 0 {
        return Err(format!("grid sizes must be positive, got {text:?}"));
    }
    Ok(grid)
}

/// Parse and dispatch; returns the process exit code.
pub fn run() -> i32 {
    if let Some(threads) = std::env::var_os("ENSEMBLECTL_THREADS") {
        let parsed = threads.to_str().and_then(|s| s.parse::<usize>().ok());
        match parsed {
            Some(n) if n > 0 => {
                // Ignore failure: the global pool can only be built once,
                // which only matters under in-process test harnesses.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: ENSEMBLECTL_THREADS must be a positive integer");
                return EXIT_ERROR;
            }
        }
    }
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve { config } => cmd_solve(&config),
        Command::Validate {
            pulse,
            b,
            delta,
            grid,
            target,
        } => cmd_validate(&pulse, b, delta, grid, target),
        Command::ExportPhysical { pulse, amp_hz, out } => {
            cmd_export_physical(&pulse, amp_hz, out.as_deref())
        }
        Command::Convergence { config } => cmd_convergence(&config),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_ERROR
        }
    }
}

/// Artifacts written so far; removed wholesale if the run errors out so a
/// failed run never leaves a partial output directory behind.
struct ArtifactSink {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl ArtifactSink {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output dir {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .collect()
    }

    fn discard(&self) {
        for path in &self.written {
            let _ = std::fs::remove_file(path);
        }
    }
}

fn cmd_solve(config_path: &Path) -> Result<i32> {
    let config = RunConfig::load(config_path)?;
    let mut sink = ArtifactSink::new(&config.output_dir)?;
    match solve_into(&config, &mut sink) {
        Ok(passed) => Ok(if passed { EXIT_OK } else { EXIT_THRESHOLD }),
        Err(err) => {
            sink.discard();
            Err(err)
        }
    }
}

fn cmd_convergence(config_path: &Path) -> Result<i32> {
    let config = RunConfig::load(config_path)?;
    if config.study.name != StudyName::Convergence {
        bail!(
            "the convergence command requires study.name = \"convergence\", got {:?}",
            config.study.name
        );
    }
    cmd_solve(config_path)
}

fn wants(config: &RunConfig, format: OutputFormat) -> bool {
    config.formats.contains(&format)
}

fn solve_into(config: &RunConfig, sink: &mut ArtifactSink) -> Result<bool> {
    let spec = config.study.to_spec();
    let solver_config = &config.solver.to_config();
    let mut reports: Vec<RobustnessReport> = Vec::new();
    let mut solver_stats: Vec<SolveReport> = Vec::new();
    let mut extra = serde_json::Map::new();

    let passed = match spec.name {
        StudyName::RobustPi => {
            let (sol, report) = studies::run_robust_pi(&spec, solver_config)?;
            write_pulse_artifacts(config, sink, "pulse", &sol)?;
            if wants(config, OutputFormat::RobustnessCsv) {
                sink.write("robustness.csv", &report.to_csv())?;
            }
            println!(
                "robust_pi: average {:.6}, worst {:.6} (threshold {})",
                report.average, report.worst, report.threshold
            );
            collect_stats(&mut solver_stats, &sol);
            let passed = report.passed;
            reports.push(report);
            passed
        }
        StudyName::ThreeStage => {
            let mode = config.study.mode();
            let (sols, stage_reports) = studies::run_three_stage(&spec, solver_config, mode)?;
            for (i, sol) in sols.iter().enumerate() {
                write_pulse_artifacts(config, sink, &format!("pulse_stage{}", i + 1), sol)?;
                collect_stats(&mut solver_stats, sol);
            }
            let mut passed = true;
            for (i, report) in stage_reports.iter().enumerate() {
                if wants(config, OutputFormat::RobustnessCsv) {
                    sink.write(&format!("robustness_stage{}.csv", i + 1), &report.to_csv())?;
                }
                println!(
                    "three_stage ({mode:?}) stage {}: average {:.6}, worst {:.6} (threshold {})",
                    i + 1,
                    report.average,
                    report.worst,
                    report.threshold
                );
                passed &= report.passed;
            }
            extra.insert("mode".into(), serde_json::to_value(mode)?);
            reports = stage_reports;
            passed
        }
        StudyName::TimeVarying => {
            let cost = config.study.cost();
            let sol = studies::run_time_varying(&spec, solver_config, cost)?;
            let params = BlochParams {
                duration: sol.horizon,
                ..spec.bloch.clone()
            };
            let report = validate_pulse(
                &params,
                &|t| {
                    let u = sol.control_at(t);
                    (u[0], u[1])
                },
                [0.0, 0.0, 1.0],
                [1.0, 0.0, 0.0],
                spec.validation_grid,
                0.99,
                spec.rk4_steps,
            )?;
            write_pulse_artifacts(config, sink, "pulse", &sol)?;
            if wants(config, OutputFormat::RobustnessCsv) {
                sink.write("robustness.csv", &report.to_csv())?;
            }
            println!(
                "time_varying ({cost:?}): M_x {:.6} at T = {:.4}, energy {:.4}",
                report.average,
                sol.horizon,
                sol.energy()
            );
            extra.insert("cost".into(), serde_json::to_value(cost)?);
            extra.insert("horizon".into(), serde_json::to_value(sol.horizon)?);
            extra.insert("energy".into(), serde_json::to_value(sol.energy())?);
            collect_stats(&mut solver_stats, &sol);
            let passed = report.passed;
            reports.push(report);
            passed
        }
        StudyName::Convergence => {
            let cells = studies::run_convergence(&spec, solver_config)?;
            if wants(config, OutputFormat::ConvergenceCsv) {
                sink.write("convergence.csv", &convergence_csv(&cells))?;
            }
            let finest = cells
                .iter()
                .max_by_key(|c| (c.time_order, c.omega_order))
                .ok_or_else(|| anyhow!("empty convergence sweep"))?;
            let avg = finest.avg_mx.unwrap_or(f64::NAN);
            println!(
                "convergence: finest cell ({}, {}) average M_x {:.6} over {} cells",
                finest.time_order,
                finest.omega_order,
                avg,
                cells.len()
            );
            extra.insert("cells".into(), serde_json::to_value(&cells)?);
            avg >= 0.99
        }
    };

    if wants(config, OutputFormat::ManifestJson) {
        let manifest = serde_json::json!({
            "config": config,
            "study": spec.echo(),
            "reports": reports.iter().map(report_summary).collect::<Vec<_>>(),
            "solver": solver_stats,
            "extra": extra,
            "artifacts": sink.names(),
            "passed": passed,
        });
        sink.write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(passed)
}

fn write_pulse_artifacts(
    config: &RunConfig,
    sink: &mut ArtifactSink,
    stem: &str,
    sol: &PulseSolution,
) -> Result<()> {
    if wants(config, OutputFormat::PulseCsv) {
        sink.write(&format!("{stem}.csv"), &sol.to_pulse_csv())?;
    }
    if wants(config, OutputFormat::PhysicalPulseCsv) {
        let amp = config
            .nominal_amplitude_hz
            .expect("config validation requires nominal_amplitude_hz");
        let pulse = bloch::to_physical(&sol.node_samples(), amp)?;
        sink.write(&format!("{stem}_physical.csv"), &pulse.to_csv())?;
    }
    Ok(())
}

fn collect_stats(stats: &mut Vec<SolveReport>, sol: &PulseSolution) {
    if let Some(report) = &sol.solver_stats {
        stats.push(report.clone());
    }
}

fn report_summary(report: &RobustnessReport) -> serde_json::Value {
    serde_json::json!({
        "average": report.average,
        "worst": report.worst,
        "threshold": report.threshold,
        "passed": report.passed,
    })
}

/// Parse a dimensionless pulse CSV (`t,u,v` header). Errors carry 1-based
/// line numbers.
pub fn read_pulse_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| anyhow!("empty pulse file"))?;
    if header.trim() != "t,u,v" {
        bail!("line 1: expected header `t,u,v`, got {header:?}");
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            bail!("line {}: expected 3 fields, got {}", idx + 1, fields.len());
        }
        let mut row = [0.0; 3];
        for (k, field) in fields.iter().enumerate() {
            row[k] = field
                .trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("line {}: bad number {field:?}: {e}", idx + 1))?;
        }
        if !row.iter().all(|x| x.is_finite()) {
            bail!("line {}: non-finite value", idx + 1);
        }
        if let Some(&(prev, _, _)) = samples.last() {
            if row[0] <= prev {
                bail!("line {}: time must be strictly increasing", idx + 1);
            }
        }
        samples.push((row[0], row[1], row[2]));
    }
    if samples.len() < 2 {
        bail!("pulse file needs at least 2 samples");
    }
    if samples[0].0 < 0.0 {
        bail!("line 2: time must start at or after 0");
    }
    Ok(samples)
}

/// Piecewise-linear control interpolant over CSV samples; constant
/// extrapolation outside the sampled range.
fn linear_controls(samples: &[(f64, f64, f64)]) -> impl Fn(f64) -> (f64, f64) + Sync + '_ {
    move |t: f64| {
        let n = samples.len();
        if t <= samples[0].0 {
            return (samples[0].1, samples[0].2);
        }
        if t >= samples[n - 1].0 {
            return (samples[n - 1].1, samples[n - 1].2);
        }
        let k = samples.partition_point(|s| s.0 <= t);
        let (t0, u0, v0) = samples[k - 1];
        let (t1, u1, v1) = samples[k];
        let a = (t - t0) / (t1 - t0);
        (u0 + a * (u1 - u0), v0 + a * (v1 - v0))
    }
}

fn cmd_validate(
    pulse_path: &Path,
    b: f64,
    delta: f64,
    grid: (usize, usize),
    target: TargetAxis,
) -> Result<i32> {
    let samples = read_pulse_csv(pulse_path)?;
    let duration = samples.last().unwrap().0;
    if duration <= 0.0 {
        bail!("pulse duration must be positive");
    }
    let max_norm = samples
        .iter()
        .map(|&(_, u, v)| (u * u + v * v).sqrt())
        .fold(0.0, f64::max);
    let params = BlochParams {
        b,
        delta,
        amplitude_bound: max_norm.max(1.0),
        duration,
        frequency_profile: None,
    };
    params.validate()?;
    let report = validate_pulse(
        &params,
        &linear_controls(&samples),
        [0.0, 0.0, 1.0],
        target.vector(),
        grid,
        0.0,
        bloch::DEFAULT_RK4_STEPS,
    )?;
    println!(
        "validate: average score {:.6}, worst {:.6} over {} samples (target {:?}, B = {b}, delta = {delta})",
        report.average,
        report.worst,
        report.scores.len(),
        target
    );
    Ok(EXIT_OK)
}

fn cmd_export_physical(pulse_path: &Path, amp_hz: f64, out: Option<&Path>) -> Result<i32> {
    let samples = read_pulse_csv(pulse_path)?;
    let pulse = bloch::to_physical(&samples, amp_hz)?;
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = pulse_path
                .file_stem()
                .ok_or_else(|| anyhow!("cannot derive output name from {}", pulse_path.display()))?
                .to_string_lossy()
                .into_owned();
            pulse_path.with_file_name(format!("{stem}_physical.csv"))
        }
    };
    std::fs::write(&out_path, pulse.to_csv())
        .with_context(|| format!("cannot write {}", out_path.display()))?;
    let span = pulse.samples.last().map(|s| s.t_seconds).unwrap_or(0.0);
    println!(
        "export-physical: wrote {} ({} samples, {:.3e} s at {amp_hz} Hz)",
        out_path.display(),
        pulse.samples.len(),
        span
    );
    Ok(EXIT_OK)
}
