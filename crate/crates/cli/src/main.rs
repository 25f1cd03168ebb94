//! `escrowsim` command line: validate scenario configs, run them into
//! NDJSON traces, and produce forensic reports from traces.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use escrowsim::agents::{simulate, ConfigError, ScenarioConfig};
use escrowsim::forensics::{self, analyze};
use escrowsim::symcrypto::digest;
use escrowsim::trace::Trace;
use escrowsim::{GasSchedule, Wei};

const LOG_ENV: &str = "ESCROWSIM_LOG";
const TRACE_FILE: &str = "trace.ndjson";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(
    name = "escrowsim",
    version,
    about = "Escrow campaign simulator and forensic reporter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario config.
    Validate { config: PathBuf },
    /// Run one or more scenario configs and write their traces.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyze a trace: cost model, affiliate revenue, milestones.
    Report {
        trace: PathBuf,
        /// Gas price in wei used to price the cost model.
        #[arg(long, default_value_t = 1_000_000_000)]
        gas_price: u128,
        /// Fiat currency per ether.
        #[arg(long, default_value_t = 175.59)]
        fiat_rate: f64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Directory for report files; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// Exit status: 1 for usage and config problems, 2 for everything else.
enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    config_digest: String,
    seed: u64,
    trace_path: String,
    trace_digest: String,
    started_sim_time: f64,
    finished_sim_time: f64,
    blocks: u64,
    records: usize,
    tool_version: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Run { configs, out } => cmd_run(&configs, &out),
        Command::Report {
            trace,
            gas_price,
            fiat_rate,
            format,
            out,
        } => cmd_report(&trace, Wei(gas_price), fiat_rate, format, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// 1-based line of the first `"field"` key in `text`, if present.
fn field_line(text: &str, field: &str) -> Option<usize> {
    let key = format!("\"{field}\"");
    text.lines().position(|l| l.contains(&key)).map(|i| i + 1)
}

fn load_config(path: &Path) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| {
        Failure::Config(format!(
            "{}:{}:{}: parse error: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    if let Err(ConfigError::Invalid { field, reason }) = cfg.validate() {
        let at = field_line(&text, field).map_or_else(String::new, |l| format!(":{l}"));
        return Err(Failure::Config(format!(
            "{}{at}: schema violation in field `{field}`: {reason}",
            path.display()
        )));
    }
    if cfg.gas_schedule.is_none() {
        let d = GasSchedule::default();
        let entries: Vec<String> = d
            .entries()
            .iter()
            .map(|(n, g)| format!("{n}={g}"))
            .collect();
        eprintln!(
            "notice: {}: gas_schedule missing, using built-in defaults ({})",
            path.display(),
            entries.join(", ")
        );
    }
    Ok(cfg)
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    load_config(path)?;
    println!("{}: ok", path.display());
    Ok(())
}

/// Writes `bytes` to `dir/name` via a temporary file and rename.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot write into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    let dest = dir.join(name);
    tmp.persist(&dest)
        .with_context(|| format!("cannot create {}", dest.display()))?;
    Ok(dest)
}

fn run_one(cfg: &ScenarioConfig, dir: &Path) -> anyhow::Result<RunManifest> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let run = simulate(cfg).map_err(|e| anyhow!("{e}"))?;
    let ndjson = run.trace.to_ndjson();
    let trace_path = write_atomic(dir, TRACE_FILE, &ndjson)?;
    let canonical = serde_json::to_vec(cfg)?;
    let manifest = RunManifest {
        config_digest: hex_string(&digest(&canonical)),
        seed: cfg.seed,
        trace_path: trace_path.display().to_string(),
        trace_digest: hex_string(&digest(&ndjson)),
        started_sim_time: 0.0,
        finished_sim_time: run.end_time_ms() as f64 / 1000.0,
        blocks: run.ledger.head().number,
        records: run.trace.records.len(),
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    let mut body = serde_json::to_vec_pretty(&manifest)?;
    body.push(b'\n');
    write_atomic(dir, MANIFEST_FILE, &body)?;
    Ok(manifest)
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_run(paths: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let configs = paths
        .iter()
        .map(|p| load_config(p))
        .collect::<Result<Vec<_>, _>>()?;
    let dirs: Vec<PathBuf> = if paths.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let stem = p
                    .file_stem()
                    .map_or_else(|| format!("run-{i}"), |s| s.to_string_lossy().into_owned());
                out.join(format!("{i:03}-{stem}"))
            })
            .collect()
    };
    let results: Vec<anyhow::Result<RunManifest>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .zip(&dirs)
            .map(|(cfg, dir)| s.spawn(move || run_one(cfg, dir)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(anyhow!("scenario worker panicked")))
            })
            .collect()
    });
    let mut first_err = None;
    for (path, r) in paths.iter().zip(results) {
        match r {
            Ok(m) => {
                info!("{} -> {}", path.display(), m.trace_path);
                println!(
                    "{} trace_digest={} blocks={}",
                    m.trace_path, m.trace_digest, m.blocks
                );
            }
            Err(e) => {
                warn!("{} failed: {e:#}", path.display());
                first_err.get_or_insert(e.context(format!("running {}", path.display())));
            }
        }
    }
    match first_err {
        Some(e) => Err(Failure::Runtime(e)),
        None => Ok(()),
    }
}

fn cmd_report(
    path: &Path,
    gas_price: Wei,
    fiat_rate: f64,
    format: Format,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if !(fiat_rate.is_finite() && fiat_rate >= 0.0) {
        return Err(Failure::Config(format!(
            "--fiat-rate must be a non-negative number, got {fiat_rate}"
        )));
    }
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let trace = Trace::from_ndjson(&text).with_context(|| path.display().to_string())?;
    let report =
        analyze(&trace, gas_price, fiat_rate).with_context(|| path.display().to_string())?;
    let c = &report.cost;
    eprintln!(
        "rho = {}, delta = {}, mu = {}, total_gas = {}, total_fiat = {:.2}",
        c.rho, c.delta, c.mu, c.total_gas, c.total_fiat
    );
    match (format, out) {
        (Format::Json, None) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?
            );
        }
        (Format::Json, Some(dir)) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let mut body = serde_json::to_vec_pretty(&report).map_err(anyhow::Error::from)?;
            body.push(b'\n');
            write_atomic(dir, "report.json", &body)?;
        }
        (Format::Csv, None) => print!("{}", forensics::cost_table_csv(c)),
        (Format::Csv, Some(dir)) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_atomic(
                dir,
                "cost_table.csv",
                forensics::cost_table_csv(c).as_bytes(),
            )?;
            write_atomic(
                dir,
                "affiliates.csv",
                forensics::affiliates_csv(&report.revenue).as_bytes(),
            )?;
            write_atomic(
                dir,
                "findings.csv",
                forensics::findings_csv(&report.findings).as_bytes(),
            )?;
        }
    }
    Ok(())
}
