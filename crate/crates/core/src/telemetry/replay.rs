//! Deterministic playback of recorded telemetry.
//!
//! Trace files are CSV with the header [`TRACE_HEADER`]. Optional
//! `# key: value` lines before the header carry the hardware identity:
//!
//! ```text
//! # cpu_model: AMD EPYC 7742 64-Core Processor
//! # gpu_names: A100;A100
//! t_s,cpu_percent,core_count,gpu_watts,ram_gb
//! 0,6400,64,250;150,16
//! 3600,0,64,0;0,0
//! ```
//!
//! `gpu_watts` lists one value per device separated by `;`. An empty cell
//! means no devices.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use super::{
    CpuObservation, GpuObservation, HardwareIdentity, RamObservation, TelemetryError,
    TelemetryProvider,
};

pub const TRACE_HEADER: &str = "t_s,cpu_percent,core_count,gpu_watts,ram_gb";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t_s: f64,
    pub cpu_percent: f64,
    pub core_count: u32,
    /// Power of each device, watts.
    pub gpu_watts: Vec<f64>,
    pub ram_gb: f64,
}

impl TraceRow {
    /// A row with a single accelerator, or none when `gpu_watts` is zero.
    pub fn new(t_s: f64, cpu_percent: f64, core_count: u32, gpu_watts: f64, ram_gb: f64) -> Self {
        TraceRow {
            t_s,
            cpu_percent,
            core_count,
            gpu_watts: if gpu_watts > 0.0 {
                vec![gpu_watts]
            } else {
                vec![]
            },
            ram_gb,
        }
    }

    pub fn gpu_total(&self) -> f64 {
        self.gpu_watts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceSpec {
    rows: Vec<TraceRow>,
    cpu_model: String,
    gpu_names: Vec<String>,
}

impl TraceSpec {
    pub fn new(
        rows: Vec<TraceRow>,
        cpu_model: impl Into<String>,
        gpu_names: Vec<String>,
    ) -> Result<Self, TraceError> {
        if let Some(first) = rows.first() {
            if first.t_s != 0.0 {
                return Err(TraceError::Invalid(format!(
                    "first row must be at t=0, found {}",
                    first.t_s
                )));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
            if !finite_nonneg(row.t_s)
                || !finite_nonneg(row.cpu_percent)
                || !finite_nonneg(row.ram_gb)
                || !row.gpu_watts.iter().all(|w| finite_nonneg(*w))
            {
                return Err(TraceError::Invalid(format!(
                    "row {i}: values must be finite and non-negative"
                )));
            }
            if row.core_count == 0 {
                return Err(TraceError::Invalid(format!(
                    "row {i}: core_count must be >= 1"
                )));
            }
            if i > 0 && row.t_s <= rows[i - 1].t_s {
                return Err(TraceError::Invalid(format!(
                    "row {i}: timestamp {} does not increase",
                    row.t_s
                )));
            }
        }
        Ok(TraceSpec {
            rows,
            cpu_model: cpu_model.into(),
            gpu_names,
        })
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn cpu_model(&self) -> &str {
        &self.cpu_model
    }

    pub fn gpu_names(&self) -> &[String] {
        &self.gpu_names
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t_s).collect()
    }

    /// Seconds covered by the trace.
    pub fn duration_s(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.t_s)
    }

    /// Index of the row holding at `t_s`, or `None` past the end.
    fn row_at(&self, t_s: f64) -> Option<usize> {
        let last = self.rows.last()?;
        if t_s > last.t_s {
            return None;
        }
        Some(
            self.rows
                .partition_point(|r| r.t_s <= t_s)
                .saturating_sub(1),
        )
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file)
    }

    pub fn from_reader(mut reader: impl Read) -> Result<Self, TraceError> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;

        let mut cpu_model = String::new();
        let mut gpu_names = Vec::new();
        let mut body_start = 0;
        let mut skipped_lines = 0u64;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if let Some(meta) = trimmed.strip_prefix('#') {
                if let Some((key, value)) = meta.split_once(':') {
                    match key.trim() {
                        "cpu_model" => cpu_model = value.trim().to_string(),
                        "gpu_names" => {
                            gpu_names = split_list(value).map(str::to_string).collect();
                        }
                        _ => {}
                    }
                }
            } else if !trimmed.is_empty() {
                break;
            }
            body_start += line.len();
            skipped_lines += 1;
        }

        let body = &text[body_start..];
        if body.trim().is_empty() {
            return Err(TraceError::Parse {
                line: skipped_lines + 1,
                message: format!("missing header `{TRACE_HEADER}`"),
            });
        }
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let header = csv.headers().map_err(|e| TraceError::Parse {
            line: skipped_lines + 1,
            message: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>().join(",") != TRACE_HEADER {
            return Err(TraceError::Parse {
                line: skipped_lines + 1,
                message: format!("expected header `{TRACE_HEADER}`"),
            });
        }

        let mut rows = Vec::new();
        for record in csv.records() {
            let line_of =
                |r: &csv::StringRecord| skipped_lines + r.position().map_or(0, |p| p.line());
            let record = record.map_err(|e| TraceError::Parse {
                line: skipped_lines + e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = line_of(&record);
            let bad = |field: &str, e: &dyn std::fmt::Display| TraceError::Parse {
                line,
                message: format!("{field}: {e}"),
            };
            let num = |idx: usize, field: &str| -> Result<f64, TraceError> {
                record[idx].parse::<f64>().map_err(|e| bad(field, &e))
            };
            let gpu_watts = split_list(&record[3])
                .map(|v| v.parse::<f64>().map_err(|e| bad("gpu_watts", &e)))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(TraceRow {
                t_s: num(0, "t_s")?,
                cpu_percent: num(1, "cpu_percent")?,
                core_count: record[2].parse().map_err(|e| bad("core_count", &e))?,
                gpu_watts,
                ram_gb: num(4, "ram_gb")?,
            });
        }
        Self::new(rows, cpu_model, gpu_names)
    }

    /// Serializes to the trace file format.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if !self.cpu_model.is_empty() {
            let _ = writeln!(out, "# cpu_model: {}", self.cpu_model);
        }
        if !self.gpu_names.is_empty() {
            let _ = writeln!(out, "# gpu_names: {}", self.gpu_names.join(";"));
        }
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let gpu: Vec<String> = r.gpu_watts.iter().map(|w| w.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.t_s,
                r.cpu_percent,
                r.core_count,
                gpu.join(";"),
                r.ram_gb
            );
        }
        out
    }
}

fn split_list(cell: &str) -> impl Iterator<Item = &str> {
    cell.split(';').map(str::trim).filter(|s| !s.is_empty())
}

/// Step-function playback of a [`TraceSpec`]: a query returns the last row
/// at or before the queried time.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    trace: TraceSpec,
}

impl ReplayProvider {
    pub fn new(trace: TraceSpec) -> Self {
        ReplayProvider { trace }
    }

    pub fn trace(&self) -> &TraceSpec {
        &self.trace
    }

    fn row(&self, at_s: f64) -> Result<&TraceRow, TelemetryError> {
        self.trace
            .row_at(at_s)
            .map(|i| &self.trace.rows[i])
            .ok_or(TelemetryError::TraceExhausted {
                at_s,
                last_s: self.trace.duration_s(),
            })
    }
}

impl TelemetryProvider for ReplayProvider {
    fn sample_cpu(&mut self, at_s: f64) -> Result<CpuObservation, TelemetryError> {
        let row = self.row(at_s)?;
        Ok(CpuObservation {
            process_cpu_percent: row.cpu_percent,
            core_count: row.core_count,
            cpu_model_name: self.trace.cpu_model.clone(),
        })
    }

    fn sample_gpu(&mut self, at_s: f64) -> Result<GpuObservation, TelemetryError> {
        let row = self.row(at_s)?;
        Ok(GpuObservation {
            device_count: row.gpu_watts.len() as u32,
            total_power_watts: row.gpu_total(),
            device_names: self.trace.gpu_names.clone(),
        })
    }

    fn sample_ram(&mut self, at_s: f64) -> Result<RamObservation, TelemetryError> {
        let row = self.row(at_s)?;
        Ok(RamObservation {
            allocated_gb: row.ram_gb,
        })
    }

    fn identity(&self) -> HardwareIdentity {
        HardwareIdentity {
            cpu_name: self.trace.cpu_model.clone(),
            gpu_names: self.trace.gpu_names.clone(),
            os_name: "replay".to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_step() -> ReplayProvider {
        let trace = TraceSpec::new(
            vec![
                TraceRow::new(0.0, 0.0, 4, 250.0, 0.0),
                TraceRow::new(10.0, 0.0, 4, 300.0, 0.0),
            ],
            "",
            vec![],
        )
        .unwrap();
        ReplayProvider::new(trace)
    }

    #[test]
    fn single_row_at_zero() {
        let trace =
            TraceSpec::new(vec![TraceRow::new(0.0, 0.0, 1, 250.0, 0.0)], "", vec![]).unwrap();
        let mut p = ReplayProvider::new(trace);
        assert_eq!(p.sample_gpu(0.0).unwrap().total_power_watts, 250.0);
    }

    #[test]
    fn left_row_holds_until_boundary() {
        let mut p = two_step();
        assert_eq!(p.sample_gpu(9.9).unwrap().total_power_watts, 250.0);
        assert_eq!(p.sample_gpu(10.0).unwrap().total_power_watts, 300.0);
    }

    #[test]
    fn past_end_is_exhausted() {
        let mut p = two_step();
        assert!(matches!(
            p.sample_cpu(10.5),
            Err(TelemetryError::TraceExhausted { last_s, .. }) if last_s == 10.0
        ));
        let mut empty = ReplayProvider::new(TraceSpec::default());
        assert!(empty.sample_ram(0.0).unwrap_err().is_end_of_workload());
    }

    #[test]
    fn device_powers_sum() {
        let text = "# gpu_names: A100;V100\nt_s,cpu_percent,core_count,gpu_watts,ram_gb\n0,0,1,250;150,0\n";
        let mut p = ReplayProvider::new(TraceSpec::from_reader(text.as_bytes()).unwrap());
        let gpu = p.sample_gpu(0.0).unwrap();
        assert_eq!(gpu.device_count, 2);
        assert_eq!(gpu.total_power_watts, 400.0);
        assert_eq!(gpu.device_names, vec!["A100", "V100"]);
    }

    #[test]
    fn ram_lookup_by_time() {
        let trace = TraceSpec::new(
            vec![
                TraceRow::new(0.0, 0.0, 1, 0.0, 1.0),
                TraceRow::new(5.0, 0.0, 1, 0.0, 2.5),
                TraceRow::new(8.0, 0.0, 1, 0.0, 4.0),
            ],
            "",
            vec![],
        )
        .unwrap();
        let mut p = ReplayProvider::new(trace);
        assert_eq!(p.sample_ram(5.0).unwrap().allocated_gb, 2.5);
        assert_eq!(p.sample_ram(7.0).unwrap().allocated_gb, 2.5);
    }

    #[test]
    fn no_accelerator_reads_zero() {
        let text = "t_s,cpu_percent,core_count,gpu_watts,ram_gb\n0,0,1,,0\n5,0,1,,0\n";
        let mut p = ReplayProvider::new(TraceSpec::from_reader(text.as_bytes()).unwrap());
        for t in [0.0, 2.0, 5.0] {
            let gpu = p.sample_gpu(t).unwrap();
            assert_eq!((gpu.device_count, gpu.total_power_watts), (0, 0.0));
        }
    }

    #[test]
    fn rejects_bad_traces() {
        let r = |t| TraceRow::new(t, 0.0, 1, 0.0, 0.0);
        assert!(TraceSpec::new(vec![r(1.0)], "", vec![]).is_err());
        assert!(TraceSpec::new(vec![r(0.0), r(0.0)], "", vec![]).is_err());
        assert!(TraceSpec::new(vec![r(0.0), r(2.0), r(1.0)], "", vec![]).is_err());
        let mut neg = r(0.0);
        neg.ram_gb = -1.0;
        assert!(TraceSpec::new(vec![neg], "", vec![]).is_err());
        let mut no_cores = r(0.0);
        no_cores.core_count = 0;
        assert!(TraceSpec::new(vec![no_cores], "", vec![]).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text =
            "# cpu_model: x\nt_s,cpu_percent,core_count,gpu_watts,ram_gb\n0,0,1,0,0\n1,abc,1,0,0\n";
        match TraceSpec::from_reader(text.as_bytes()) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let wrong_header = "t,cpu,cores,gpu,ram\n0,0,1,0,0\n";
        assert!(matches!(
            TraceSpec::from_reader(wrong_header.as_bytes()),
            Err(TraceError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn header_only_is_empty_trace() {
        let t = TraceSpec::from_reader(format!("{TRACE_HEADER}\n").as_bytes()).unwrap();
        assert!(t.rows().is_empty());
        assert_eq!(t.duration_s(), 0.0);
    }

    fn arb_trace() -> impl Strategy<Value = TraceSpec> {
        prop::collection::vec(
            (
                1u32..10_000,
                0f64..6400.0,
                1u32..128,
                prop::collection::vec(0f64..700.0, 0..4),
                0f64..512.0,
            ),
            0..20,
        )
        .prop_map(|steps| {
            let mut t = 0.0;
            let rows = steps
                .into_iter()
                .enumerate()
                .map(|(i, (dt, cpu, cores, gpu, ram))| {
                    if i > 0 {
                        t += f64::from(dt);
                    }
                    TraceRow {
                        t_s: t,
                        cpu_percent: cpu,
                        core_count: cores,
                        gpu_watts: gpu,
                        ram_gb: ram,
                    }
                })
                .collect();
            TraceSpec::new(rows, "cpu", vec!["g".into()]).unwrap()
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(trace in arb_trace()) {
            let back = TraceSpec::from_reader(trace.to_csv().as_bytes()).unwrap();
            prop_assert_eq!(back, trace);
        }

        #[test]
        fn replay_is_deterministic(trace in arb_trace(), probes in prop::collection::vec(0f64..200_000.0, 1..30)) {
            let mut a = ReplayProvider::new(trace.clone());
            let mut b = ReplayProvider::new(trace);
            for t in probes {
                prop_assert_eq!(a.sample_cpu(t), b.sample_cpu(t));
                prop_assert_eq!(a.sample_gpu(t), b.sample_gpu(t));
                prop_assert_eq!(a.sample_ram(t), b.sample_ram(t));
            }
        }
    }
}
