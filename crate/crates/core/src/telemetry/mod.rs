//! Instantaneous power telemetry for a tracked workload.
//!
//! A [`TelemetryProvider`] reports what the tracked process tree is doing
//! right now (CPU share, resident memory) together with the accelerator
//! power of the host. [`PowerModel`] turns those observations into a
//! [`PowerSample`] in watts, which the energy ledger integrates.
//!
//! Three providers ship with the crate:
//!
//! - [`ReplayProvider`] plays back a recorded [`TraceSpec`] deterministically.
//! - [`SystemTelemetry`] reads `/proc` for a live process tree (Linux only)
//!   and queries accelerators through a [`GpuSource`].
//! - [`NoGpu`] / `NvmlGpu` are the accelerator sources used by the former.

mod gpu;
#[cfg(target_os = "linux")]
mod process;
mod replay;

use thiserror::Error;

#[cfg(feature = "nvml")]
pub use gpu::NvmlGpu;
pub use gpu::{detect_gpu, GpuSource, NoGpu};
#[cfg(target_os = "linux")]
pub use process::ProcessTree;
pub use replay::{ReplayProvider, TraceError, TraceRow, TraceSpec, TRACE_HEADER};

/// Watts drawn per gigabyte of resident memory (DDR3/DDR4 estimate).
pub const DEFAULT_RAM_WATTS_PER_GB: f64 = 0.375;

/// Bytes in one gigabyte of resident memory, as reported by the process utilities.
pub const BYTES_PER_GB: f64 = 1024.0 * 1024.0 * 1024.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("tracked process {0} has exited")]
    ProcessGone(i32),
    #[error("permission denied reading stats of process {pid}: {detail}")]
    PermissionDenied { pid: i32, detail: String },
    #[error("trace exhausted at t={at_s}s (last row at {last_s}s)")]
    TraceExhausted { at_s: f64, last_s: f64 },
    #[error("process telemetry is not supported on this platform")]
    Unsupported,
    #[error("telemetry read failed: {0}")]
    Io(String),
}

impl TelemetryError {
    /// Errors that mean the observed workload is over rather than broken.
    pub fn is_end_of_workload(&self) -> bool {
        matches!(
            self,
            TelemetryError::ProcessGone(_) | TelemetryError::TraceExhausted { .. }
        )
    }
}

/// One timestamped reading of power draw, in watts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSample {
    /// Seconds since session start.
    pub timestamp_s: f64,
    pub cpu_watts: f64,
    pub gpu_watts: f64,
    pub ram_watts: f64,
}

impl PowerSample {
    pub fn zero(timestamp_s: f64) -> Self {
        PowerSample {
            timestamp_s,
            cpu_watts: 0.0,
            gpu_watts: 0.0,
            ram_watts: 0.0,
        }
    }

    pub(crate) fn is_valid(&self) -> bool {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        self.timestamp_s.is_finite()
            && ok(self.cpu_watts)
            && ok(self.gpu_watts)
            && ok(self.ram_watts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuObservation {
    /// Percent of one core used by the process tree; 200 means two full cores.
    pub process_cpu_percent: f64,
    pub core_count: u32,
    pub cpu_model_name: String,
}

impl CpuObservation {
    /// Share of the whole processor in use, clamped to `[0, 1]`.
    pub fn utilization(&self) -> f64 {
        let cores = f64::from(self.core_count.max(1));
        let share = self.process_cpu_percent / (100.0 * cores);
        if share.is_nan() || share <= 0.0 {
            0.0
        } else {
            share.min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GpuObservation {
    pub device_count: u32,
    pub total_power_watts: f64,
    pub device_names: Vec<String>,
}

impl GpuObservation {
    pub fn none() -> Self {
        GpuObservation::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RamObservation {
    pub allocated_gb: f64,
}

/// Static description of the machine a session ran on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HardwareIdentity {
    pub cpu_name: String,
    pub gpu_names: Vec<String>,
    pub os_name: String,
}

/// Source of power observations for one tracked workload.
///
/// `at_s` is the session-relative time of the poll. Live providers ignore
/// it; the replay provider uses it to pick the trace row.
pub trait TelemetryProvider: Send {
    fn sample_cpu(&mut self, at_s: f64) -> Result<CpuObservation, TelemetryError>;
    fn sample_gpu(&mut self, at_s: f64) -> Result<GpuObservation, TelemetryError>;
    fn sample_ram(&mut self, at_s: f64) -> Result<RamObservation, TelemetryError>;
    fn identity(&self) -> HardwareIdentity;

    /// True when CPU readings are averages over the interval since the
    /// previous poll rather than the level holding from this poll onwards.
    fn cpu_is_trailing_average(&self) -> bool {
        false
    }
}

impl<P: TelemetryProvider + ?Sized> TelemetryProvider for Box<P> {
    fn sample_cpu(&mut self, at_s: f64) -> Result<CpuObservation, TelemetryError> {
        (**self).sample_cpu(at_s)
    }
    fn sample_gpu(&mut self, at_s: f64) -> Result<GpuObservation, TelemetryError> {
        (**self).sample_gpu(at_s)
    }
    fn sample_ram(&mut self, at_s: f64) -> Result<RamObservation, TelemetryError> {
        (**self).sample_ram(at_s)
    }
    fn identity(&self) -> HardwareIdentity {
        (**self).identity()
    }
    fn cpu_is_trailing_average(&self) -> bool {
        (**self).cpu_is_trailing_average()
    }
}

/// Converts observations into watts for one session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerModel {
    pub tdp_watts: f64,
    pub ram_watts_per_gb: f64,
}

impl PowerModel {
    pub fn new(tdp_watts: f64) -> Self {
        PowerModel {
            tdp_watts,
            ram_watts_per_gb: DEFAULT_RAM_WATTS_PER_GB,
        }
    }

    pub fn with_ram_watts_per_gb(mut self, watts: f64) -> Self {
        self.ram_watts_per_gb = watts;
        self
    }

    pub fn compose(
        &self,
        cpu: &CpuObservation,
        gpu: &GpuObservation,
        ram: &RamObservation,
        timestamp_s: f64,
    ) -> PowerSample {
        PowerSample {
            timestamp_s,
            cpu_watts: self.tdp_watts * cpu.utilization(),
            gpu_watts: gpu.total_power_watts.max(0.0),
            ram_watts: self.ram_watts_per_gb * ram.allocated_gb.max(0.0),
        }
    }
}

/// Assembles a sample with the default RAM constant.
pub fn compose_sample(
    cpu: &CpuObservation,
    gpu: &GpuObservation,
    ram: &RamObservation,
    tdp_watts: f64,
    timestamp_s: f64,
) -> PowerSample {
    PowerModel::new(tdp_watts).compose(cpu, gpu, ram, timestamp_s)
}

/// Live telemetry for a process tree plus host accelerators.
pub struct SystemTelemetry {
    #[cfg(target_os = "linux")]
    tree: ProcessTree,
    gpu: Box<dyn GpuSource>,
}

impl SystemTelemetry {
    /// Tracks `pid` and its descendants, with accelerators auto-detected.
    pub fn for_process(pid: i32) -> Result<Self, TelemetryError> {
        Self::with_gpu(pid, detect_gpu())
    }

    pub fn for_current_process() -> Result<Self, TelemetryError> {
        Self::for_process(std::process::id() as i32)
    }

    #[cfg(target_os = "linux")]
    pub fn with_gpu(pid: i32, gpu: Box<dyn GpuSource>) -> Result<Self, TelemetryError> {
        Ok(SystemTelemetry {
            tree: ProcessTree::new(pid)?,
            gpu,
        })
    }

    #[cfg(not(target_os = "linux"))]
    pub fn with_gpu(_pid: i32, _gpu: Box<dyn GpuSource>) -> Result<Self, TelemetryError> {
        Err(TelemetryError::Unsupported)
    }
}

#[cfg(target_os = "linux")]
impl TelemetryProvider for SystemTelemetry {
    fn sample_cpu(&mut self, _at_s: f64) -> Result<CpuObservation, TelemetryError> {
        self.tree.sample_cpu()
    }

    fn sample_gpu(&mut self, _at_s: f64) -> Result<GpuObservation, TelemetryError> {
        Ok(self.gpu.sample())
    }

    fn sample_ram(&mut self, _at_s: f64) -> Result<RamObservation, TelemetryError> {
        self.tree.sample_ram()
    }

    fn identity(&self) -> HardwareIdentity {
        HardwareIdentity {
            cpu_name: self.tree.cpu_model_name().to_string(),
            gpu_names: self.gpu.device_names(),
            os_name: process::os_name(),
        }
    }

    fn cpu_is_trailing_average(&self) -> bool {
        true
    }
}

#[cfg(not(target_os = "linux"))]
impl TelemetryProvider for SystemTelemetry {
    fn sample_cpu(&mut self, _at_s: f64) -> Result<CpuObservation, TelemetryError> {
        Err(TelemetryError::Unsupported)
    }
    fn sample_gpu(&mut self, _at_s: f64) -> Result<GpuObservation, TelemetryError> {
        Ok(self.gpu.sample())
    }
    fn sample_ram(&mut self, _at_s: f64) -> Result<RamObservation, TelemetryError> {
        Err(TelemetryError::Unsupported)
    }
    fn identity(&self) -> HardwareIdentity {
        HardwareIdentity {
            cpu_name: String::new(),
            gpu_names: self.gpu.device_names(),
            os_name: std::env::consts::OS.to_string(),
        }
    }
}
