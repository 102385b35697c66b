//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;

use crate::calibration::{Anchors, Calibration, Platform, StrategyKind};
use crate::error::Error;
use crate::feasibility::{self, read_curve, sweep, write_curve, CurveRow};
use crate::join::write_join_log;
use crate::scenario::{Scenario, Validated};
use crate::sim::{self, metrics::Metrics};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "BLTSCH_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "bltsch", version, about = "Battery-less TSCH device simulator and feasibility engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario file and print diagnostics.
    ///
    /// Example: bltsch validate --scenario scenarios/strategy1_solar.toml
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run a scenario for one or more seeds and write metrics.
    ///
    /// Example: bltsch simulate --scenario scenarios/strategy3_rf.toml --out runs/s3 --seeds 3
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Run seeds 1..=N instead of the scenario's list.
        #[arg(long, conflicts_with = "seed_list")]
        seeds: Option<u64>,
        /// Comma-separated explicit seeds.
        #[arg(long, value_delimiter = ',')]
        seed_list: Option<Vec<u64>>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Minimum sustainable update interval at one harvest power.
    ///
    /// Example: bltsch feasibility --strategy synchronized --power 300e-6
    Feasibility {
        #[arg(long)]
        strategy: String,
        /// Use the strategy's optimization variant.
        #[arg(long)]
        variant: bool,
        /// Harvest power in watts.
        #[arg(long)]
        power: f64,
        #[command(flatten)]
        cal: CalArgs,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Feasibility curves over a log-spaced power range.
    ///
    /// Example: bltsch sweep --lo 10e-6 --hi 1000e-6 --points 50 --out curves.csv
    Sweep {
        /// Strategy name, or `all` for every strategy.
        #[arg(long, default_value = "all")]
        strategy: String,
        #[arg(long, default_value_t = 10e-6)]
        lo: f64,
        #[arg(long, default_value_t = 1000e-6)]
        hi: f64,
        #[arg(long, default_value_t = 50)]
        points: usize,
        /// Only base configurations (no variants).
        #[arg(long)]
        base_only: bool,
        #[command(flatten)]
        cal: CalArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Fit the calibration constants to the anchors and write the calibration file.
    ///
    /// Example: bltsch calibrate --out calibration/default.toml --force
    Calibrate {
        /// Optional TOML with [anchors] and/or [platform] overrides.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "calibration/default.toml")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Re-read a curve CSV and check its format.
    ///
    /// Example: bltsch validate-curve curves.csv
    ValidateCurve { file: PathBuf },
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory (default: $BLTSCH_OUT_DIR).
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CalArgs {
    /// Calibration file; the built-in fit when absent.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

impl CalArgs {
    fn load(&self) -> Result<Calibration, Error> {
        match &self.calibration {
            Some(p) => Calibration::load(p),
            None => Ok(Calibration::builtin()),
        }
    }
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid { .. } | Error::Parse { .. } | Error::Trace { .. } | Error::OutputExists(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            EXIT_VALIDATION
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Validate { scenario } => {
            let v = load_scenario(&scenario)?;
            println!(
                "ok: {} ({} devices, {} routers, horizon {} s)",
                v.scenario.name,
                v.devices.len(),
                v.routers.len(),
                v.horizon()
            );
            Ok(())
        }
        Command::Simulate {
            scenario,
            out,
            seeds,
            seed_list,
            format,
        } => {
            let v = load_scenario(&scenario)?;
            let seeds = match (seeds, seed_list) {
                (Some(n), _) => (1..=n).collect(),
                (None, Some(list)) => list,
                (None, None) => v.scenario.seeds.clone(),
            };
            if seeds.is_empty() {
                return Err(Failure::Validation("no seeds to run".into()));
            }
            simulate(&v, &seeds, &out.out, out.force, format)
        }
        Command::Feasibility {
            strategy,
            variant,
            power,
            cal,
            format,
        } => {
            let kind = parse_kind(&strategy)?;
            if !(power >= 0.0) {
                return Err(Failure::Validation("power must be >= 0".into()));
            }
            let cal = cal.load()?;
            let rows = sweep(&[cal.case(kind, variant)], &[power]);
            emit_rows(&rows, format, std::io::stdout().lock())
        }
        Command::Sweep {
            strategy,
            lo,
            hi,
            points,
            base_only,
            cal,
            out,
            force,
            format,
        } => {
            let kinds: Vec<StrategyKind> = if strategy == "all" {
                StrategyKind::ALL.to_vec()
            } else {
                vec![parse_kind(&strategy)?]
            };
            let cal = cal.load()?;
            let powers = feasibility::log_space(lo, hi, points)?;
            let mut cases = Vec::new();
            for k in kinds {
                cases.push(cal.case(k, false));
                if !base_only {
                    cases.push(cal.case(k, true));
                }
            }
            let rows = sweep(&cases, &powers);
            match out {
                None => emit_rows(&rows, format, std::io::stdout().lock()),
                Some(path) => {
                    guard_file(&path, force)?;
                    let mut buf = Vec::new();
                    emit_rows(&rows, format, &mut buf)?;
                    write_atomic(&path, &buf)?;
                    eprintln!("wrote {} rows to {}", rows.len(), path.display());
                    Ok(())
                }
            }
        }
        Command::Calibrate { input, out, force } => {
            #[derive(Deserialize, Default)]
            #[serde(default, deny_unknown_fields)]
            struct Input {
                anchors: Anchors,
                platform: Platform,
            }
            let inp: Input = match input {
                Some(p) => {
                    let text = fs::read_to_string(&p)?;
                    toml::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {}", p.display(), e.message())))?
                }
                None => Input::default(),
            };
            let cal = Calibration::fit(inp.anchors, inp.platform)?;
            guard_file(&out, force)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_atomic(&out, cal.to_toml()?.as_bytes())?;
            let report = serde_json::json!({
                "fitted": cal.fitted,
                "achieved": cal.report(),
            });
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            Ok(())
        }
        Command::ValidateCurve { file } => {
            let f = fs::File::open(&file)?;
            let rows = read_curve(f)?;
            let mut bad = 0;
            for (i, r) in rows.iter().enumerate() {
                if !(r.power_w >= 0.0) || r.feasible != r.min_interval_s.is_finite() {
                    eprintln!("{}: row {}: inconsistent feasibility", file.display(), i + 1);
                    bad += 1;
                }
            }
            if bad > 0 {
                return Err(Failure::Validation(format!("{bad} invalid rows")));
            }
            let mut buf = Vec::new();
            write_curve(&rows, &mut buf)?;
            let original = fs::read(&file)?;
            let lossless = buf == original;
            println!("ok: {} rows, round-trip {}", rows.len(), if lossless { "lossless" } else { "normalized" });
            Ok(())
        }
    }
}

fn parse_kind(s: &str) -> Result<StrategyKind, Failure> {
    StrategyKind::parse(s).ok_or_else(|| {
        Failure::Validation(format!("unknown strategy `{s}` (expected synchronized, adhoc or nonsynchronized)"))
    })
}

fn load_scenario(path: &Path) -> Result<Validated, Failure> {
    Scenario::load(path).map_err(|diags| {
        let msg: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        Failure::Validation(format!("{} diagnostic(s)\n{}", diags.len(), msg.join("\n")))
    })
}

fn emit_rows<W: Write>(rows: &[CurveRow], format: Format, mut w: W) -> Result<(), Failure> {
    match format {
        Format::Csv => write_curve(rows, w)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, rows).map_err(Error::from)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn guard_file(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()).into());
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Runs every seed in parallel and writes the output directory atomically.
pub fn simulate_to_dir(v: &Validated, seeds: &[u64], out: &Path, force: bool, format: Format) -> crate::Result<()> {
    if out.exists() && !force {
        return Err(Error::OutputExists(out.to_path_buf()));
    }
    let runs: Vec<Metrics> = seeds.par_iter().map(|&s| sim::run(v, s)).collect();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let result = write_outputs(v, &runs, &tmp, format).and_then(|()| {
        if out.exists() {
            fs::remove_dir_all(out)?;
        }
        fs::rename(&tmp, out)?;
        Ok(())
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

fn simulate(v: &Validated, seeds: &[u64], out: &Path, force: bool, format: Format) -> Result<(), Failure> {
    simulate_to_dir(v, seeds, out, force, format)?;
    println!("wrote {} seed(s) to {}", seeds.len(), out.display());
    Ok(())
}

fn write_outputs(v: &Validated, runs: &[Metrics], dir: &Path, format: Format) -> crate::Result<()> {
    fs::create_dir_all(dir)?;
    let file = |n: &str| fs::File::create(dir.join(n)).map(std::io::BufWriter::new);
    for m in runs {
        let stem = format!("seed_{}", m.seed);
        match format {
            Format::Json => serde_json::to_writer_pretty(file(&format!("{stem}.json"))?, m)?,
            Format::Csv => {
                serde_json::to_writer_pretty(file(&format!("{stem}.json"))?, &m.summary_json())?;
                m.write_nodes_csv(file(&format!("{stem}_nodes.csv"))?)?;
                m.write_frames_csv(file(&format!("{stem}_frames.csv"))?)?;
                m.write_routers_csv(file(&format!("{stem}_routers.csv"))?)?;
                m.write_log_csv(file(&format!("{stem}_log.csv"))?)?;
                m.write_energy_csv(file(&format!("{stem}_energy.csv"))?)?;
                write_join_log(&m.joins, file(&format!("{stem}_joins.csv"))?)?;
            }
        }
    }
    v.schedule()?.write_csv(file("schedule.csv")?)?;
    if let Some(tt) = &v.timetable {
        tt.write_csv(file("timetable.csv")?)?;
    }
    serde_json::to_writer_pretty(file("summary.json")?, &merged_summary(v, runs))?;
    Ok(())
}

fn merged_summary(v: &Validated, runs: &[Metrics]) -> serde_json::Value {
    let mean = |f: &dyn Fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / runs.len().max(1) as f64;
    let delivered: u64 = runs.iter().flat_map(|m| &m.nodes).map(|n| n.frames_delivered).sum();
    let sent: u64 = runs.iter().flat_map(|m| &m.nodes).map(|n| n.frames_sent).sum();
    serde_json::json!({
        "scenario": v.scenario.name,
        "seeds": runs.iter().map(|m| m.seed).collect::<Vec<_>>(),
        "digests": runs.iter().map(|m| m.digest.clone()).collect::<Vec<_>>(),
        "horizon": v.horizon(),
        "frames_sent": sent,
        "frames_delivered": delivered,
        "delivery_ratio": if sent > 0 { delivered as f64 / sent as f64 } else { 0.0 },
        "mean_off_fraction": mean(&|m| {
            m.nodes.iter().map(|n| n.off_fraction).sum::<f64>() / m.nodes.len().max(1) as f64
        }),
        "mean_join_successes": mean(&|m| m.nodes.iter().map(|n| n.join_successes as f64).sum::<f64>()),
    })
}
