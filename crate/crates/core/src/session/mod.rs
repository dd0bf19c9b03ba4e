//! Tracking session lifecycle: configured → running → stopped.
//!
//! [`Tracker::start`] resolves the region and processor TDP, captures the
//! civil start time and launches a sampler thread. [`Tracker::stop`] halts
//! sampling, closes the energy integral, converts it to CO2 and appends
//! the resulting [`EmissionRecord`] to the report. [`wrap`] does both
//! around a closure.

mod clock;
mod sampler;

use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::cpu_db::{CpuDatabase, TdpLookup};
use crate::emissions::{
    self, carbon_footprint, resolve_region, EmissionDatabase, EmissionsError, GeoResolver,
    ResolvedRegion,
};
use crate::energy::{EnergyLedger, EnergyTotals};
use crate::reporting::{
    append_record, EmissionRecord, EncryptionKey, ReportError, START_TIME_FORMAT,
};
use crate::telemetry::{
    HardwareIdentity, PowerModel, ReplayProvider, SystemTelemetry, TelemetryError,
    TelemetryProvider, TraceSpec, DEFAULT_RAM_WATTS_PER_GB,
};

pub use clock::ClockMode;
use clock::{SessionClock, Signal, Tick};
use sampler::Sampler;

pub const DEFAULT_OUTPUT: &str = "emission.csv";
pub const DEFAULT_SAMPLING_PERIOD_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session is already running")]
    AlreadyRunning,
    #[error("session has already been stopped")]
    AlreadyStopped,
    #[error("session is not running")]
    NotRunning,
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Emissions(#[from] EmissionsError),
    #[error("writing the emission record: {0}")]
    Report(#[from] ReportError),
    #[error("sampler thread panicked")]
    SamplerPanicked,
}

/// User-facing knobs of one session.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub project_name: String,
    pub experiment_description: String,
    /// Power usage effectiveness of the facility, at least 1.
    pub pue: f64,
    pub sampling_period_s: f64,
    /// Report file; `None` keeps the record in memory only.
    pub output: Option<PathBuf>,
    /// Encrypts report rows when set.
    pub encryption_key: Option<EncryptionKey>,
    /// `CC` or `CC/Region`. Falls back to the `CO2TRACK_COUNTRY` variable.
    pub region_override: Option<String>,
    /// Pins the emission coefficient (kg/MWh), bypassing the database.
    pub gamma_override: Option<f64>,
    pub cpu_tdp_override: Option<f64>,
    pub ram_watts_per_gb: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            project_name: "default".to_string(),
            experiment_description: String::new(),
            pue: 1.0,
            sampling_period_s: DEFAULT_SAMPLING_PERIOD_S,
            output: Some(PathBuf::from(DEFAULT_OUTPUT)),
            encryption_key: None,
            region_override: None,
            gamma_override: None,
            cpu_tdp_override: None,
            ram_watts_per_gb: DEFAULT_RAM_WATTS_PER_GB,
        }
    }
}

impl SessionConfig {
    pub fn new(project_name: impl Into<String>) -> Self {
        SessionConfig {
            project_name: project_name.into(),
            ..Default::default()
        }
    }

    pub fn describe(mut self, description: impl Into<String>) -> Self {
        self.experiment_description = description.into();
        self
    }

    pub fn output(mut self, path: Option<impl Into<PathBuf>>) -> Self {
        self.output = path.map(Into::into);
        self
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let invalid = |msg: String| Err(SessionError::InvalidConfig(msg));
        if emissions::validate_pue(self.pue).is_err() {
            return invalid(format!("pue must be >= 1, got {}", self.pue));
        }
        if !(self.sampling_period_s.is_finite() && self.sampling_period_s > 0.0) {
            return invalid(format!(
                "sampling period must be positive, got {}",
                self.sampling_period_s
            ));
        }
        let positive = |v: Option<f64>| v.is_none_or(|v| v.is_finite() && v > 0.0);
        if !positive(self.gamma_override) {
            return invalid("emission coefficient override must be positive".into());
        }
        if !positive(self.cpu_tdp_override) {
            return invalid("TDP override must be positive".into());
        }
        if !(self.ram_watts_per_gb.is_finite() && self.ram_watts_per_gb >= 0.0) {
            return invalid("RAM watts per GB must be non-negative".into());
        }
        if let Some(region) = &self.region_override {
            ResolvedRegion::parse(region, emissions::RegionSource::Override)
                .map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

type ProviderFactory = dyn Fn() -> Result<Box<dyn TelemetryProvider>, TelemetryError> + Send + Sync;

/// Everything a session needs besides its config: databases, the
/// telemetry source, the geolocation client and the clock.
#[derive(Clone)]
pub struct SessionEnv {
    pub cpu_db: Arc<CpuDatabase>,
    pub emission_db: Arc<EmissionDatabase>,
    pub geo: Arc<dyn GeoResolver>,
    pub clock: ClockMode,
    telemetry: Arc<ProviderFactory>,
}

impl fmt::Debug for SessionEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionEnv")
            .field("cpu_models", &self.cpu_db.len())
            .field("emission_rows", &self.emission_db.rows().len())
            .field("clock", &self.clock)
            .finish_non_exhaustive()
    }
}

impl SessionEnv {
    /// Live telemetry of `pid` and its descendants.
    pub fn for_process(pid: i32) -> Self {
        Self::with_provider(move || {
            SystemTelemetry::for_process(pid).map(|t| Box::new(t) as Box<dyn TelemetryProvider>)
        })
    }

    /// Live telemetry of the calling process.
    pub fn system() -> Self {
        Self::for_process(std::process::id() as i32)
    }

    /// Plays `trace` back in simulated time, polling at each row.
    pub fn replay(trace: TraceSpec) -> Self {
        let schedule: Arc<[f64]> = trace.timestamps().into();
        let mut env = Self::with_provider(move || Ok(Box::new(ReplayProvider::new(trace.clone()))));
        env.clock = ClockMode::scheduled(schedule);
        env
    }

    pub fn with_provider<F, P>(factory: F) -> Self
    where
        F: Fn() -> Result<P, TelemetryError> + Send + Sync + 'static,
        P: TelemetryProvider + 'static,
    {
        SessionEnv {
            cpu_db: Arc::new(CpuDatabase::embedded()),
            emission_db: Arc::new(EmissionDatabase::embedded()),
            geo: default_geo(),
            clock: ClockMode::Wall,
            telemetry: Arc::new(move || {
                factory().map(|p| Box::new(p) as Box<dyn TelemetryProvider>)
            }),
        }
    }

    pub fn clock(mut self, clock: ClockMode) -> Self {
        self.clock = clock;
        self
    }

    pub fn geo(mut self, geo: impl GeoResolver + 'static) -> Self {
        self.geo = Arc::new(geo);
        self
    }

    pub fn cpu_db(mut self, db: CpuDatabase) -> Self {
        self.cpu_db = Arc::new(db);
        self
    }

    pub fn emission_db(mut self, db: EmissionDatabase) -> Self {
        self.emission_db = Arc::new(db);
        self
    }
}

#[cfg(feature = "geoip")]
fn default_geo() -> Arc<dyn GeoResolver> {
    Arc::new(emissions::HttpGeoResolver::default())
}

#[cfg(not(feature = "geoip"))]
fn default_geo() -> Arc<dyn GeoResolver> {
    Arc::new(emissions::NoGeo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Configured,
    Running,
    Stopped,
}

/// Facts fixed at start time.
#[derive(Debug, Clone)]
pub struct SessionInfo {
    pub start_time: String,
    pub region: ResolvedRegion,
    pub gamma_kg_per_mwh: f64,
    /// Country label written to the report.
    pub country: String,
    pub tdp: TdpLookup,
    pub hardware: HardwareIdentity,
}

struct Running {
    info: SessionInfo,
    ledger: Arc<Mutex<EnergyLedger>>,
    signal: Arc<Signal>,
    clock: Arc<SessionClock>,
    thread: JoinHandle<Sampler>,
}

enum State {
    Configured,
    Running(Box<Running>),
    Stopped(Box<EmissionRecord>),
}

/// One tracking session.
pub struct Tracker {
    config: SessionConfig,
    env: SessionEnv,
    state: State,
}

impl fmt::Debug for Tracker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tracker")
            .field("project", &self.config.project_name)
            .field("phase", &self.phase())
            .finish()
    }
}

impl Tracker {
    pub fn new(config: SessionConfig, env: SessionEnv) -> Self {
        Tracker {
            config,
            env,
            state: State::Configured,
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        match self.state {
            State::Configured => Phase::Configured,
            State::Running(_) => Phase::Running,
            State::Stopped(_) => Phase::Stopped,
        }
    }

    pub fn info(&self) -> Option<&SessionInfo> {
        match &self.state {
            State::Running(r) => Some(&r.info),
            _ => None,
        }
    }

    /// The record produced by `stop`, once stopped.
    pub fn record(&self) -> Option<&EmissionRecord> {
        match &self.state {
            State::Stopped(r) => Some(r),
            _ => None,
        }
    }

    pub fn start(&mut self) -> Result<(), SessionError> {
        match self.state {
            State::Running(_) => return Err(SessionError::AlreadyRunning),
            State::Stopped(_) => return Err(SessionError::AlreadyStopped),
            State::Configured => {}
        }
        self.config.validate()?;

        let provider = (self.env.telemetry)()?;
        let hardware = provider.identity();

        let env_region = std::env::var(emissions::COUNTRY_ENV).ok();
        let region_spec = self
            .config
            .region_override
            .as_deref()
            .or(env_region.as_deref());
        let region = resolve_region(region_spec, self.env.geo.as_ref())
            .map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        let coefficient = self.env.emission_db.coefficient(&region);
        let country = coefficient.map_or_else(|| region.label(), |c| c.place());
        let gamma_kg_per_mwh = self
            .config
            .gamma_override
            .unwrap_or_else(|| self.env.emission_db.lookup_gamma(&region));

        let tdp = match self.config.cpu_tdp_override {
            Some(watts) => TdpLookup {
                tdp_watts: watts,
                kind: crate::cpu_db::MatchKind::Exact,
                model: None,
            },
            None => self.env.cpu_db.lookup_tdp(&hardware.cpu_name),
        };
        if !tdp.matched() {
            log::info!(
                "CPU `{}` not in the TDP database, assuming {} W",
                hardware.cpu_name,
                tdp.tdp_watts
            );
        }
        let model =
            PowerModel::new(tdp.tdp_watts).with_ram_watts_per_gb(self.config.ram_watts_per_gb);

        let clock = Arc::new(SessionClock::start(
            self.env.clock.clone(),
            self.config.sampling_period_s,
        ));
        let start_time = clock.civil_start().format(START_TIME_FORMAT).to_string();
        let ledger = Arc::new(Mutex::new(EnergyLedger::new()));
        let signal = Arc::new(Signal::default());

        let mut sampler = Sampler::new(provider, model, ledger.clone());
        match sampler.poll(clock.first_poll_s()) {
            Ok(()) => {}
            Err(e) if e.is_end_of_workload() => sampler.end(Some(e)),
            Err(e) => return Err(e.into()),
        }

        let thread = {
            let signal = signal.clone();
            let clock = clock.clone();
            std::thread::Builder::new()
                .name("co2-sampler".into())
                .spawn(move || run_sampler(sampler, &clock, &signal))
                .map_err(|e| SessionError::Telemetry(TelemetryError::Io(e.to_string())))?
        };

        self.state = State::Running(Box::new(Running {
            info: SessionInfo {
                start_time,
                region,
                gamma_kg_per_mwh,
                country,
                tdp,
                hardware,
            },
            ledger,
            signal,
            clock,
            thread,
        }));
        Ok(())
    }

    /// Live totals while running; energy so far, duration at the last poll.
    pub fn snapshot(&self) -> Option<EnergyTotals> {
        match &self.state {
            State::Running(r) => Some(r.ledger.lock().unwrap().finalize()),
            _ => None,
        }
    }

    /// True once the workload ended by itself (process exit, trace end).
    pub fn workload_ended(&self) -> bool {
        match &self.state {
            State::Running(r) => r.signal.is_ended(),
            _ => false,
        }
    }

    /// Blocks until the workload ends by itself, or `timeout` passes.
    pub fn wait_for_end(&self, timeout: Option<Duration>) -> Result<bool, SessionError> {
        match &self.state {
            State::Running(r) => Ok(r.signal.wait_ended(timeout)),
            _ => Err(SessionError::NotRunning),
        }
    }

    pub fn stop(&mut self) -> Result<EmissionRecord, SessionError> {
        let running = match std::mem::replace(&mut self.state, State::Configured) {
            State::Running(r) => r,
            other => {
                self.state = other;
                return Err(SessionError::NotRunning);
            }
        };
        let Running {
            info,
            ledger,
            signal,
            clock,
            thread,
        } = *running;

        signal.halt();
        let sampler = thread.join();
        let totals = match sampler {
            Ok(mut sampler) => {
                sampler.finish(clock.now_s());
                ledger.lock().unwrap().finalize()
            }
            Err(_) => {
                self.state = State::Stopped(Box::new(self.build_record(
                    &info,
                    &EnergyTotals::default(),
                    0.0,
                )));
                return Err(SessionError::SamplerPanicked);
            }
        };

        let co2_kg = carbon_footprint(&totals, info.gamma_kg_per_mwh, self.config.pue)?;
        let record = self.build_record(&info, &totals, co2_kg);
        self.state = State::Stopped(Box::new(record.clone()));
        if let Some(path) = &self.config.output {
            append_record(path, &record, self.config.encryption_key.as_ref())?;
        }
        Ok(record)
    }

    fn build_record(
        &self,
        info: &SessionInfo,
        totals: &EnergyTotals,
        co2_kg: f64,
    ) -> EmissionRecord {
        EmissionRecord {
            project_name: self.config.project_name.clone(),
            experiment_description: self.config.experiment_description.clone(),
            start_time: info.start_time.clone(),
            duration_s: totals.duration_s,
            power_kwh: totals.total_kwh,
            co2_kg,
            cpu_name: info.hardware.cpu_name.clone(),
            gpu_name: describe_gpus(&info.hardware.gpu_names),
            os_name: info.hardware.os_name.clone(),
            country: info.country.clone(),
        }
    }
}

impl Drop for Tracker {
    fn drop(&mut self) {
        if let State::Running(r) = &self.state {
            r.signal.halt();
        }
    }
}

fn run_sampler(mut sampler: Sampler, clock: &SessionClock, signal: &Signal) -> Sampler {
    if !sampler.is_ended() {
        let mut k = 1;
        loop {
            match clock.tick(k, signal) {
                Tick::At(t) => {
                    if let Err(e) = sampler.poll(t) {
                        sampler.end(Some(e));
                        break;
                    }
                }
                Tick::Finished => {
                    sampler.end(None);
                    break;
                }
                Tick::Halted => break,
            }
            k += 1;
        }
    }
    if sampler.is_ended() {
        signal.mark_ended();
    }
    sampler
}

/// `A100 x8`, or names joined with `; ` for mixed hosts.
pub fn describe_gpus(names: &[String]) -> String {
    let mut groups: Vec<(&str, usize)> = Vec::new();
    for name in names {
        match groups.iter_mut().find(|(n, _)| n == name) {
            Some(g) => g.1 += 1,
            None => groups.push((name, 1)),
        }
    }
    groups
        .into_iter()
        .map(|(n, c)| {
            if c == 1 {
                n.to_string()
            } else {
                format!("{n} x{c}")
            }
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum WrapError<E> {
    /// The workload failed; its record was still written.
    #[error("workload failed: {error}")]
    Workload {
        error: E,
        record: Box<EmissionRecord>,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// Runs `work` inside a session. The record is written whether or not the
/// workload succeeds; a failure or panic is re-raised afterwards.
pub fn wrap<T, E>(
    config: SessionConfig,
    env: &SessionEnv,
    work: impl FnOnce() -> Result<T, E>,
) -> Result<T, WrapError<E>> {
    let mut tracker = Tracker::new(config, env.clone());
    tracker.start()?;
    let outcome = panic::catch_unwind(AssertUnwindSafe(work));
    let record = tracker.stop()?;
    match outcome {
        Ok(Ok(value)) => Ok(value),
        Ok(Err(error)) => Err(WrapError::Workload {
            error,
            record: Box::new(record),
        }),
        Err(payload) => panic::resume_unwind(payload),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emissions::NoGeo;
    use crate::reporting::read_records;
    use crate::telemetry::TraceRow;

    fn constant_gpu(hours: f64, watts: f64) -> TraceSpec {
        TraceSpec::new(
            vec![
                TraceRow::new(0.0, 0.0, 8, watts, 0.0),
                TraceRow::new(hours * 3600.0, 0.0, 8, watts, 0.0),
            ],
            "my homebrew cpu",
            vec!["A100".into()],
        )
        .unwrap()
    }

    fn offline(env: SessionEnv) -> SessionEnv {
        env.geo(NoGeo)
    }

    fn finish(tracker: &mut Tracker) -> EmissionRecord {
        assert!(tracker.wait_for_end(Some(Duration::from_secs(10))).unwrap());
        tracker.stop().unwrap()
    }

    #[test]
    fn four_hours_of_gpu_at_global_average() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("emission.csv");
        let config = SessionConfig::new("p").output(Some(&out));
        let mut t = Tracker::new(
            config,
            offline(SessionEnv::replay(constant_gpu(4.0, 250.0))),
        );
        t.start().unwrap();
        let r = finish(&mut t);
        assert_eq!(r.power_kwh, 1.0);
        assert_eq!(r.co2_kg, 0.4365);
        assert_eq!(r.duration_s, 14400.0);
        assert_eq!(r.country, "unknown");
        assert_eq!(r.gpu_name, "A100");
        assert_eq!(r.start_time, "1970-01-01 00:00:00");
        assert_eq!(t.phase(), Phase::Stopped);
        assert_eq!(read_records(&out, None).unwrap(), vec![r.as_written()]);
    }

    #[test]
    fn stepping_clock_matches_schedule() {
        let env =
            offline(SessionEnv::replay(constant_gpu(1.0, 250.0))).clock(ClockMode::simulated());
        let mut config = SessionConfig::new("p").output(None::<PathBuf>);
        config.sampling_period_s = 7.0;
        let mut t = Tracker::new(config, env);
        t.start().unwrap();
        let r = finish(&mut t);
        assert_eq!(r.duration_s, 3600.0);
        assert_eq!(r.power_kwh, 0.25);
    }

    #[test]
    fn start_twice_is_rejected() {
        let mut t = Tracker::new(
            SessionConfig::new("p").output(None::<PathBuf>),
            offline(SessionEnv::replay(constant_gpu(1.0, 1.0))),
        );
        t.start().unwrap();
        assert!(matches!(t.start(), Err(SessionError::AlreadyRunning)));
        t.stop().unwrap();
        assert!(matches!(t.start(), Err(SessionError::AlreadyStopped)));
        assert!(matches!(t.stop(), Err(SessionError::NotRunning)));
    }

    #[test]
    fn stop_without_start() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("emission.csv");
        let mut t = Tracker::new(
            SessionConfig::new("p").output(Some(&out)),
            offline(SessionEnv::replay(constant_gpu(1.0, 1.0))),
        );
        assert!(matches!(t.stop(), Err(SessionError::NotRunning)));
        assert_eq!(t.phase(), Phase::Configured);
        assert!(!out.exists());
    }

    #[test]
    fn low_pue_is_invalid() {
        let mut config = SessionConfig::new("p").output(None::<PathBuf>);
        config.pue = 0.5;
        let mut t = Tracker::new(config, offline(SessionEnv::replay(constant_gpu(1.0, 1.0))));
        assert!(matches!(t.start(), Err(SessionError::InvalidConfig(_))));
        assert_eq!(t.phase(), Phase::Configured);
    }

    #[test]
    fn other_invalid_configs() {
        let base = || SessionConfig::new("p").output(None::<PathBuf>);
        let mut bad = vec![base(), base(), base(), base()];
        bad[0].sampling_period_s = 0.0;
        bad[1].gamma_override = Some(-3.0);
        bad[2].region_override = Some("France".into());
        bad[3].cpu_tdp_override = Some(f64::NAN);
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(base().validate().is_ok());
    }

    #[test]
    fn immediate_stop_on_wall_clock() {
        let env = offline(SessionEnv::replay(constant_gpu(1.0, 250.0))).clock(ClockMode::Wall);
        let mut t = Tracker::new(SessionConfig::new("p").output(None::<PathBuf>), env);
        t.start().unwrap();
        assert_eq!(t.phase(), Phase::Running);
        assert_eq!(t.snapshot().unwrap().total_kwh, 0.0);
        let r = t.stop().unwrap();
        assert!(r.duration_s < 0.5, "{r:?}");
        assert!(r.power_kwh < 250.0 * 0.5 / 3.6e6);
    }

    #[test]
    fn region_override_and_database() {
        let mut config = SessionConfig::new("p").output(None::<PathBuf>);
        config.region_override = Some("fr".into());
        let mut t = Tracker::new(
            config,
            offline(SessionEnv::replay(constant_gpu(4.0, 250.0))),
        );
        t.start().unwrap();
        let info = t.info().unwrap().clone();
        assert_eq!(info.gamma_kg_per_mwh, 67.53);
        assert_eq!(info.country, "France");
        assert!(!info.tdp.matched());
        let r = finish(&mut t);
        assert!((r.co2_kg - 0.06753).abs() < 1e-15);
    }

    #[test]
    fn gamma_override_wins_over_database() {
        let mut config = SessionConfig::new("p").output(None::<PathBuf>);
        config.region_override = Some("IN".into());
        config.gamma_override = Some(436.5);
        let mut t = Tracker::new(
            config,
            offline(SessionEnv::replay(constant_gpu(4.0, 250.0))),
        );
        t.start().unwrap();
        let r = finish(&mut t);
        assert_eq!(r.co2_kg, 0.4365);
        assert_eq!(r.country, "India");
    }

    #[test]
    fn tdp_override_and_cpu_path() {
        let trace = TraceSpec::new(
            vec![
                TraceRow::new(0.0, 400.0, 8, 0.0, 16.0),
                TraceRow::new(3600.0, 0.0, 8, 0.0, 0.0),
            ],
            "AMD EPYC 7742 64-Core Processor",
            vec![],
        )
        .unwrap();
        let mut t = Tracker::new(
            SessionConfig::new("p").output(None::<PathBuf>),
            offline(SessionEnv::replay(trace.clone())),
        );
        t.start().unwrap();
        assert_eq!(t.info().unwrap().tdp.tdp_watts, 225.0);
        let r = finish(&mut t);
        assert!((r.power_kwh - (0.1125 + 0.006)).abs() < 1e-15);

        let mut config = SessionConfig::new("p").output(None::<PathBuf>);
        config.cpu_tdp_override = Some(100.0);
        let mut t = Tracker::new(config, offline(SessionEnv::replay(trace)));
        t.start().unwrap();
        let r = finish(&mut t);
        assert!((r.power_kwh - 0.056).abs() < 1e-15);
    }

    #[test]
    fn empty_trace_zero_record() {
        let mut t = Tracker::new(
            SessionConfig::new("p").output(None::<PathBuf>),
            offline(SessionEnv::replay(TraceSpec::default())),
        );
        t.start().unwrap();
        let r = finish(&mut t);
        assert_eq!((r.duration_s, r.power_kwh, r.co2_kg), (0.0, 0.0, 0.0));
    }

    #[test]
    fn wrap_writes_record_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("emission.csv");
        let env = offline(SessionEnv::replay(constant_gpu(1.0, 100.0))).clock(ClockMode::Wall);
        let config = SessionConfig::new("wrapped").output(Some(&out));

        let ok: Result<u32, WrapError<String>> = wrap(config.clone(), &env, || Ok(7));
        assert_eq!(ok.unwrap(), 7);
        let err = wrap(config.clone(), &env, || Err::<(), _>("boom".to_string())).unwrap_err();
        match err {
            WrapError::Workload { error, record } => {
                assert_eq!(error, "boom");
                assert_eq!(record.project_name, "wrapped");
            }
            other => panic!("{other}"),
        }
        let panicked = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _ = wrap(config.clone(), &env, || -> Result<(), ()> {
                panic!("kaboom")
            });
        }));
        assert!(panicked.is_err());

        let rows = read_records(&out, None).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.project_name == "wrapped"));
    }

    #[test]
    fn encrypted_session_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("encoded_emissions.csv");
        let key = EncryptionKey::new("secret").unwrap();
        let mut config = SessionConfig::new("Test_1")
            .describe("testing encoding mode")
            .output(Some(&out));
        config.encryption_key = Some(key.clone());
        let mut t = Tracker::new(
            config,
            offline(SessionEnv::replay(constant_gpu(1.0, 100.0))),
        );
        t.start().unwrap();
        let r = finish(&mut t);
        assert!(!std::fs::read_to_string(&out).unwrap().contains("Test_1"));
        assert_eq!(
            read_records(&out, Some(&key)).unwrap(),
            vec![r.as_written()]
        );
    }

    #[test]
    fn gpu_descriptions() {
        let n = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(describe_gpus(&[]), "");
        assert_eq!(describe_gpus(&n(&["A100"; 8])), "A100 x8");
        assert_eq!(describe_gpus(&n(&["A100", "T4", "A100"])), "A100 x2; T4");
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn live_session_on_current_process() {
        let mut config = SessionConfig::new("live").output(None::<PathBuf>);
        config.sampling_period_s = 0.05;
        let mut t = Tracker::new(config, SessionEnv::system().geo(NoGeo));
        t.start().unwrap();
        let deadline = std::time::Instant::now() + Duration::from_millis(300);
        let mut x = 1u64;
        while std::time::Instant::now() < deadline {
            x = std::hint::black_box(x.wrapping_mul(6364136223846793005).wrapping_add(1));
        }
        let r = t.stop().unwrap();
        assert!(r.duration_s >= 0.3 && r.duration_s < 5.0, "{r:?}");
        assert!(r.power_kwh > 0.0);
        assert!(r.os_name.starts_with("Linux"));
    }
}
