use super::GpuObservation;

/// Host accelerator power. Failures never surface: an unreadable device
/// contributes zero watts.
pub trait GpuSource: Send {
    fn sample(&mut self) -> GpuObservation;
    fn device_names(&self) -> Vec<String>;
}

/// A host with no usable accelerator.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoGpu;

impl GpuSource for NoGpu {
    fn sample(&mut self) -> GpuObservation {
        GpuObservation::none()
    }

    fn device_names(&self) -> Vec<String> {
        Vec::new()
    }
}

/// NVIDIA devices through the management library, loaded at runtime.
#[cfg(feature = "nvml")]
pub struct NvmlGpu {
    nvml: nvml_wrapper::Nvml,
    names: Vec<String>,
}

#[cfg(feature = "nvml")]
impl NvmlGpu {
    /// `None` when the driver library is missing or reports no devices.
    pub fn detect() -> Option<Self> {
        let nvml = match nvml_wrapper::Nvml::init() {
            Ok(nvml) => nvml,
            Err(e) => {
                log::debug!("NVML unavailable, GPU power counts as zero: {e}");
                return None;
            }
        };
        let count = nvml.device_count().ok()?;
        if count == 0 {
            return None;
        }
        let names = (0..count)
            .map(|i| {
                nvml.device_by_index(i)
                    .and_then(|d| d.name())
                    .unwrap_or_else(|_| format!("gpu{i}"))
            })
            .collect();
        Some(NvmlGpu { nvml, names })
    }
}

#[cfg(feature = "nvml")]
impl GpuSource for NvmlGpu {
    fn sample(&mut self) -> GpuObservation {
        let mut total_mw = 0u64;
        for i in 0..self.names.len() as u32 {
            match self.nvml.device_by_index(i).and_then(|d| d.power_usage()) {
                Ok(mw) => total_mw += u64::from(mw),
                Err(e) => log::debug!("power read failed on gpu{i}: {e}"),
            }
        }
        GpuObservation {
            device_count: self.names.len() as u32,
            total_power_watts: total_mw as f64 / 1000.0,
            device_names: self.names.clone(),
        }
    }

    fn device_names(&self) -> Vec<String> {
        self.names.clone()
    }
}

/// Best available accelerator source for this host.
pub fn detect_gpu() -> Box<dyn GpuSource> {
    #[cfg(feature = "nvml")]
    if let Some(gpu) = NvmlGpu::detect() {
        return Box::new(gpu);
    }
    Box::new(NoGpu)
}
