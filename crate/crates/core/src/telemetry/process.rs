//! Process-tree CPU and memory readings from `/proc`.

use std::collections::HashMap;
use std::time::Instant;

use procfs::process::{all_processes, Process, Stat};
use procfs::{Current, ProcError, WithCurrentSystemInfo};

use super::{CpuObservation, RamObservation, TelemetryError, BYTES_PER_GB};

/// A root process and all of its descendants.
pub struct ProcessTree {
    root: i32,
    core_count: u32,
    cpu_model: String,
    ticks_per_s: f64,
    baseline: (Instant, f64),
}

impl ProcessTree {
    pub fn new(root: i32) -> Result<Self, TelemetryError> {
        let ticks_per_s = procfs::ticks_per_second() as f64;
        let core_count = std::thread::available_parallelism()
            .map(|n| n.get() as u32)
            .unwrap_or(1);
        let cpu_model = procfs::CpuInfo::current()
            .ok()
            .and_then(|info| info.model_name(0).map(str::to_string))
            .unwrap_or_default();
        let mut tree = ProcessTree {
            root,
            core_count,
            cpu_model,
            ticks_per_s,
            baseline: (Instant::now(), 0.0),
        };
        Process::new(root).map_err(|e| map_err(root, e))?;
        // A root that already exited is still trackable: its first poll
        // reports the exit and the session closes normally.
        let cpu_s = match tree.cpu_seconds() {
            Err(TelemetryError::ProcessGone(_)) => 0.0,
            other => other?,
        };
        tree.baseline = (Instant::now(), cpu_s);
        Ok(tree)
    }

    pub fn cpu_model_name(&self) -> &str {
        &self.cpu_model
    }

    /// Average CPU percent of the tree since the previous call.
    pub fn sample_cpu(&mut self) -> Result<CpuObservation, TelemetryError> {
        let cpu_s = self.cpu_seconds()?;
        let now = Instant::now();
        let (then, prev_cpu_s) = self.baseline;
        let wall_s = now.duration_since(then).as_secs_f64();
        // Descendants that exit without being reaped inside the tree take
        // their CPU time with them, so the counter can step backwards.
        let used_s = (cpu_s - prev_cpu_s).max(0.0);
        self.baseline = (now, cpu_s);
        let percent = if wall_s > 0.0 {
            100.0 * used_s / wall_s
        } else {
            0.0
        };
        Ok(CpuObservation {
            process_cpu_percent: percent,
            core_count: self.core_count,
            cpu_model_name: self.cpu_model.clone(),
        })
    }

    pub fn sample_ram(&mut self) -> Result<RamObservation, TelemetryError> {
        let rss_bytes: u64 = self
            .member_stats()?
            .iter()
            .map(|s| s.rss_bytes().get())
            .sum();
        Ok(RamObservation {
            allocated_gb: rss_bytes as f64 / BYTES_PER_GB,
        })
    }

    fn cpu_seconds(&self) -> Result<f64, TelemetryError> {
        let ticks: u64 = self
            .member_stats()?
            .iter()
            .map(|s| s.utime + s.stime + s.cutime.max(0) as u64 + s.cstime.max(0) as u64)
            .sum();
        Ok(ticks as f64 / self.ticks_per_s)
    }

    /// Stats of the root followed by every live descendant.
    fn member_stats(&self) -> Result<Vec<Stat>, TelemetryError> {
        let root = Process::new(self.root)
            .and_then(|p| p.stat())
            .map_err(|e| map_err(self.root, e))?;
        if root.state == 'Z' || root.state == 'X' {
            return Err(TelemetryError::ProcessGone(self.root));
        }

        let mut children: HashMap<i32, Vec<Stat>> = HashMap::new();
        if let Ok(procs) = all_processes() {
            for stat in procs.flatten().filter_map(|p| p.stat().ok()) {
                children.entry(stat.ppid).or_default().push(stat);
            }
        }

        let mut members = vec![root];
        let mut i = 0;
        while i < members.len() {
            if let Some(kids) = children.remove(&members[i].pid) {
                members.extend(kids);
            }
            i += 1;
        }
        Ok(members)
    }
}

fn map_err(pid: i32, e: ProcError) -> TelemetryError {
    match e {
        ProcError::NotFound(_) => TelemetryError::ProcessGone(pid),
        ProcError::PermissionDenied(path) => TelemetryError::PermissionDenied {
            pid,
            detail: path.map(|p| p.display().to_string()).unwrap_or_default(),
        },
        ProcError::Io(ref io, _) if io.kind() == std::io::ErrorKind::NotFound => {
            TelemetryError::ProcessGone(pid)
        }
        other => TelemetryError::Io(other.to_string()),
    }
}

pub(crate) fn os_name() -> String {
    match std::fs::read_to_string("/proc/sys/kernel/osrelease") {
        Ok(release) => format!("Linux {}", release.trim()),
        Err(_) => "Linux".to_string(),
    }
}
