//! `co2track`: run, attach to, or replay a workload and report its energy
//! use and CO2 emissions.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use carbon_tracker::emissions::NoGeo;
use carbon_tracker::reporting::{read_records, summary, PASSPHRASE_ENV};
use carbon_tracker::{
    CpuDatabase, EmissionDatabase, EmissionRecord, EncryptionKey, SessionConfig, SessionEnv,
    SessionError, SummaryRow, TraceSpec, Tracker,
};
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const DEFAULT_REPORT: &str = "emission.csv";

#[derive(Parser)]
#[command(
    name = "co2track",
    version,
    about = "Track energy use and CO2 emissions of workloads"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a command and track it with its children.
    Run {
        #[command(flatten)]
        track: TrackArgs,
        /// Command and arguments.
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Track a running process until it exits or Ctrl-C.
    Attach {
        #[command(flatten)]
        track: TrackArgs,
        #[arg(long)]
        pid: i32,
    },
    /// Play a telemetry trace back in simulated time and print the record.
    Replay {
        #[command(flatten)]
        track: TrackArgs,
        trace: PathBuf,
    },
    /// Per-project totals of a report.
    Summary {
        #[arg(default_value = DEFAULT_REPORT)]
        path: PathBuf,
        #[arg(long, env = "CO2TRACK_KWH_PRICE")]
        kwh_price: Option<f64>,
        /// Decrypt the report with the passphrase in CO2TRACK_PASSPHRASE.
        #[arg(long, env = "CO2TRACK_DECRYPT")]
        decrypt: bool,
        #[arg(long, env = "CO2TRACK_JSON")]
        json: bool,
    },
    /// Print the rows of a report, decrypted if needed.
    Records {
        #[arg(default_value = DEFAULT_REPORT)]
        path: PathBuf,
        #[arg(long, env = "CO2TRACK_DECRYPT")]
        decrypt: bool,
        #[arg(long, env = "CO2TRACK_JSON")]
        json: bool,
    },
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long, env = "CO2TRACK_PROJECT", default_value = "default")]
    project: String,
    #[arg(long, env = "CO2TRACK_DESCRIPTION", default_value = "")]
    description: String,
    /// Report file [default: emission.csv; replay writes none unless given].
    #[arg(long, env = "CO2TRACK_OUTPUT")]
    output: Option<PathBuf>,
    #[arg(long, env = "CO2TRACK_PUE", default_value_t = 1.0)]
    pue: f64,
    /// `CC` or `CC/Region`, ISO 3166 alpha-2.
    #[arg(long, env = "CO2TRACK_COUNTRY")]
    country: Option<String>,
    /// Seconds between polls.
    #[arg(long, env = "CO2TRACK_SAMPLING_PERIOD", default_value_t = 1.0)]
    sampling_period: f64,
    /// Encrypt report rows with the passphrase in CO2TRACK_PASSPHRASE.
    #[arg(long, env = "CO2TRACK_ENCRYPT")]
    encrypt: bool,
    /// Emission coefficient in kg CO2 per MWh.
    #[arg(long, env = "CO2TRACK_GAMMA_OVERRIDE")]
    gamma_override: Option<f64>,
    /// Processor TDP in watts.
    #[arg(long, env = "CO2TRACK_TDP_OVERRIDE")]
    tdp_override: Option<f64>,
    #[arg(long, env = "CO2TRACK_JSON")]
    json: bool,
    /// CSV of processor TDPs replacing the built-in table.
    #[arg(long, env = "CO2TRACK_CPU_DB")]
    cpu_db: Option<PathBuf>,
    /// CSV of emission coefficients replacing the built-in table.
    #[arg(long, env = "CO2TRACK_EMISSION_DB")]
    emission_db: Option<PathBuf>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Failure {
            code: EXIT_IO,
            error: error.into(),
        }
    }
}

fn session_failure(e: SessionError) -> Failure {
    match e {
        SessionError::InvalidConfig(_) => Failure::usage(e),
        other => other.into(),
    }
}

fn passphrase() -> Result<EncryptionKey, Failure> {
    let pass = std::env::var(PASSPHRASE_ENV).unwrap_or_default();
    EncryptionKey::new(&pass).ok_or_else(|| {
        Failure::usage(anyhow!(
            "{PASSPHRASE_ENV} must be set to a non-empty passphrase"
        ))
    })
}

impl TrackArgs {
    fn config(&self, default_output: Option<&Path>) -> Result<SessionConfig, Failure> {
        let mut config = SessionConfig::new(&self.project).describe(&self.description);
        config.output = self
            .output
            .clone()
            .or_else(|| default_output.map(Path::to_path_buf));
        config.pue = self.pue;
        config.sampling_period_s = self.sampling_period;
        config.region_override = self.country.clone();
        config.gamma_override = self.gamma_override;
        config.cpu_tdp_override = self.tdp_override;
        if self.encrypt {
            config.encryption_key = Some(passphrase()?);
        }
        config.validate().map_err(session_failure)?;
        Ok(config)
    }

    fn env(&self, mut env: SessionEnv) -> Result<SessionEnv, Failure> {
        if let Some(path) = &self.cpu_db {
            let db = CpuDatabase::from_path(path)
                .with_context(|| format!("loading {}", path.display()))?;
            env = env.cpu_db(db);
        }
        if let Some(path) = &self.emission_db {
            let db = EmissionDatabase::from_path(path)
                .with_context(|| format!("loading {}", path.display()))?;
            env = env.emission_db(db);
        }
        Ok(env)
    }

    fn report(&self, record: &EmissionRecord, out: &mut impl Write) -> io::Result<()> {
        print_record(record, self.json, out)
    }
}

fn print_record(record: &EmissionRecord, json: bool, out: &mut impl Write) -> io::Result<()> {
    let record = record.as_written();
    if json {
        serde_json::to_writer_pretty(&mut *out, &record)?;
        return writeln!(out);
    }
    let fields = record.to_fields();
    let rows = [
        ("project", &fields[0]),
        ("description", &fields[1]),
        ("start time", &fields[2]),
        ("duration (s)", &fields[3]),
        ("energy (kWh)", &fields[4]),
        ("CO2 (kg)", &fields[5]),
        ("CPU", &fields[6]),
        ("GPU", &fields[7]),
        ("OS", &fields[8]),
        ("country", &fields[9]),
    ];
    for (name, value) in rows {
        writeln!(out, "{name:<13} {value}")?;
    }
    Ok(())
}

/// Ctrl-C and SIGTERM raise a flag instead of killing us, so the record
/// still gets written.
fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install signal handler: {e}");
    }
    flag
}

#[cfg(unix)]
fn exit_code(status: std::process::ExitStatus) -> u8 {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(code), _) => code as u8,
        (None, Some(sig)) => 128u8.wrapping_add(sig as u8),
        (None, None) => 1,
    }
}

#[cfg(not(unix))]
fn exit_code(status: std::process::ExitStatus) -> u8 {
    status.code().map_or(1, |c| c as u8)
}

fn cmd_run(track: &TrackArgs, command: &[String]) -> Result<u8, Failure> {
    let config = track.config(Some(Path::new(DEFAULT_REPORT)))?;
    let _interrupt = interrupt_flag();
    let mut child = Command::new(&command[0])
        .args(&command[1..])
        .spawn()
        .with_context(|| format!("cannot run `{}`", command[0]))?;

    let env = track.env(SessionEnv::for_process(child.id() as i32).geo(default_geo()))?;
    let mut tracker = Tracker::new(config, env);
    let started = tracker.start();
    if let Err(e) = &started {
        log::error!("tracking disabled: {e}");
    }
    let status = child.wait().context("waiting for the command")?;
    let code = exit_code(status);

    if started.is_ok() {
        match tracker.stop() {
            Ok(record) => track.report(&record, &mut io::stderr())?,
            Err(e) => {
                eprintln!("co2track: {e}");
                return Ok(if code == 0 { EXIT_IO } else { code });
            }
        }
    }
    Ok(code)
}

fn cmd_attach(track: &TrackArgs, pid: i32) -> Result<u8, Failure> {
    let config = track.config(Some(Path::new(DEFAULT_REPORT)))?;
    let env = track.env(SessionEnv::for_process(pid).geo(default_geo()))?;
    let interrupted = interrupt_flag();
    let mut tracker = Tracker::new(config, env);
    tracker.start().map_err(session_failure)?;
    while !interrupted.load(Ordering::SeqCst) {
        if tracker
            .wait_for_end(Some(Duration::from_millis(100)))
            .map_err(session_failure)?
        {
            break;
        }
    }
    let record = tracker.stop().map_err(session_failure)?;
    track.report(&record, &mut io::stdout().lock())?;
    Ok(0)
}

fn cmd_replay(track: &TrackArgs, trace: &Path) -> Result<u8, Failure> {
    let config = track.config(None)?;
    let trace =
        TraceSpec::from_path(trace).with_context(|| format!("reading {}", trace.display()))?;
    let env = track.env(SessionEnv::replay(trace).geo(NoGeo))?;
    let mut tracker = Tracker::new(config, env);
    tracker.start().map_err(session_failure)?;
    tracker.wait_for_end(None).map_err(session_failure)?;
    let record = tracker.stop().map_err(session_failure)?;
    track.report(&record, &mut io::stdout().lock())?;
    Ok(0)
}

fn read_key(decrypt: bool) -> Result<Option<EncryptionKey>, Failure> {
    decrypt.then(passphrase).transpose()
}

fn cmd_summary(
    path: &Path,
    kwh_price: Option<f64>,
    decrypt: bool,
    json: bool,
) -> Result<u8, Failure> {
    let key = read_key(decrypt)?;
    let rows = summary(path, kwh_price, key.as_ref())
        .with_context(|| format!("summarizing {}", path.display()))?;
    let mut out = io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, &rows)?;
        writeln!(out)?;
    } else {
        write_table(&rows, kwh_price.is_some(), &mut out)?;
    }
    Ok(0)
}

fn write_table(rows: &[SummaryRow], with_cost: bool, out: &mut impl Write) -> io::Result<()> {
    let mut header = vec![
        "project",
        "sessions",
        "duration(s)",
        "power(kWh)",
        "CO2(kg)",
    ];
    if with_cost {
        header.push("cost");
    }
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let mut line = vec![
            r.project_name.clone(),
            r.sessions.to_string(),
            format!("{:.6}", r.total_duration_s),
            format!("{:.6}", r.total_power_kwh),
            format!("{:.6}", r.total_co2_kg),
        ];
        if let Some(cost) = r.cost {
            line.push(format!("{cost:.6}"));
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            cells
                .iter()
                .map(|c| c[i].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    for line in cells {
        let mut text = String::new();
        for (i, cell) in line.iter().enumerate() {
            if i == 0 {
                text.push_str(&format!("{cell:<w$}", w = widths[i]));
            } else {
                text.push_str(&format!("  {cell:>w$}", w = widths[i]));
            }
        }
        writeln!(out, "{}", text.trim_end())?;
    }
    Ok(())
}

fn cmd_records(path: &Path, decrypt: bool, json: bool) -> Result<u8, Failure> {
    let key = read_key(decrypt)?;
    let records =
        read_records(path, key.as_ref()).with_context(|| format!("reading {}", path.display()))?;
    let mut out = io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, &records)?;
        writeln!(out)?;
        return Ok(0);
    }
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(carbon_tracker::reporting::REPORT_COLUMNS)?;
    for r in &records {
        w.write_record(r.to_fields())?;
    }
    w.flush()?;
    Ok(0)
}

#[cfg(feature = "geoip")]
fn default_geo() -> carbon_tracker::emissions::HttpGeoResolver {
    carbon_tracker::emissions::HttpGeoResolver::default()
}

#[cfg(not(feature = "geoip"))]
fn default_geo() -> NoGeo {
    NoGeo
}

/// The error chain on one line, without causes already quoted by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in error.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CO2TRACK_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Run { track, command } => cmd_run(track, command),
        Cmd::Attach { track, pid } => cmd_attach(track, *pid),
        Cmd::Replay { track, trace } => cmd_replay(track, trace),
        Cmd::Summary {
            path,
            kwh_price,
            decrypt,
            json,
        } => cmd_summary(path, *kwh_price, *decrypt, *json),
        Cmd::Records {
            path,
            decrypt,
            json,
        } => cmd_records(path, *decrypt, *json),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("co2track: {}", describe(&error));
            ExitCode::from(code)
        }
    }
}
