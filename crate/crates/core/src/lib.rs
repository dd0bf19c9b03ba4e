//! Energy and carbon-emission tracking for compute workloads.
//!
//! A [`Tracker`] samples CPU, GPU and RAM power of a process tree (or a
//! recorded trace), integrates it into kWh, converts that to kg of CO2 using
//! a regional emission coefficient and the facility PUE, and appends one
//! row per session to a CSV report, optionally encrypted.
//!
//! ```no_run
//! use carbon_tracker::{SessionConfig, SessionEnv, Tracker};
//!
//! let mut tracker = Tracker::new(SessionConfig::new("my-project"), SessionEnv::system());
//! tracker.start()?;
//! // ... workload ...
//! let record = tracker.stop()?;
//! println!("{:.6} kg CO2", record.co2_kg);
//! # Ok::<(), carbon_tracker::SessionError>(())
//! ```

pub mod cpu_db;
pub mod emissions;
pub mod energy;
pub mod reporting;
pub mod session;
pub mod telemetry;

pub use cpu_db::{CpuDatabase, MatchKind, TdpLookup, FALLBACK_TDP_WATTS};
pub use emissions::{
    carbon_footprint, EmissionCoefficient, EmissionDatabase, GeoResolver, NoGeo, ResolvedRegion,
    StaticGeo, GLOBAL_AVERAGE_KG_PER_MWH,
};
pub use energy::{EnergyLedger, EnergyTotals};
pub use reporting::{
    append_record, read_records, summarize, summary, EmissionRecord, EncryptionKey, ReportError,
    SummaryRow,
};
pub use session::{
    wrap, ClockMode, Phase, SessionConfig, SessionEnv, SessionError, SessionInfo, Tracker,
    WrapError,
};
pub use telemetry::{
    PowerModel, PowerSample, ReplayProvider, TelemetryError, TelemetryProvider, TraceRow, TraceSpec,
};
