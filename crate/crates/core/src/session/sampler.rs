use std::sync::{Arc, Mutex};

use crate::energy::EnergyLedger;
use crate::telemetry::{
    CpuObservation, GpuObservation, PowerModel, PowerSample, RamObservation, TelemetryError,
    TelemetryProvider,
};

/// Polls a provider and feeds the ledger.
///
/// Providers whose CPU reading is an average over the previous interval
/// are handled by holding each poll back until the next one arrives, so
/// that the average lands on the interval it describes.
pub(crate) struct Sampler {
    provider: Box<dyn TelemetryProvider>,
    model: PowerModel,
    ledger: Arc<Mutex<EnergyLedger>>,
    trailing: bool,
    pending: Option<(f64, GpuObservation, RamObservation)>,
    last_poll: Option<f64>,
    ended: bool,
    /// Fixed end of the workload, when the provider knows it.
    end_at: Option<f64>,
}

impl Sampler {
    pub fn new(
        provider: Box<dyn TelemetryProvider>,
        model: PowerModel,
        ledger: Arc<Mutex<EnergyLedger>>,
    ) -> Self {
        let trailing = provider.cpu_is_trailing_average();
        Sampler {
            provider,
            model,
            ledger,
            trailing,
            pending: None,
            last_poll: None,
            ended: false,
            end_at: None,
        }
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    fn push(&self, sample: PowerSample) {
        if let Err(e) = self.ledger.lock().unwrap().accumulate(sample) {
            log::warn!("dropping power sample: {e}");
        }
    }

    fn idle_cpu(&self) -> CpuObservation {
        CpuObservation {
            process_cpu_percent: 0.0,
            core_count: 1,
            cpu_model_name: String::new(),
        }
    }

    pub fn poll(&mut self, t: f64) -> Result<(), TelemetryError> {
        if self.last_poll.is_some_and(|last| t <= last) {
            return Ok(());
        }
        let cpu = self.provider.sample_cpu(t)?;
        let gpu = self.provider.sample_gpu(t)?;
        let ram = self.provider.sample_ram(t)?;
        self.last_poll = Some(t);
        if self.trailing {
            if let Some((t0, gpu0, ram0)) = self.pending.take() {
                self.push(self.model.compose(&cpu, &gpu0, &ram0, t0));
            }
            self.pending = Some((t, gpu, ram));
        } else {
            self.push(self.model.compose(&cpu, &gpu, &ram, t));
        }
        Ok(())
    }

    /// Records that the workload is over.
    pub fn end(&mut self, reason: Option<TelemetryError>) {
        match reason {
            Some(TelemetryError::TraceExhausted { last_s, .. }) => {
                if let Err(e) = self.poll(last_s) {
                    log::debug!("closing poll at trace end failed: {e}");
                }
                self.end_at = Some(self.last_poll.unwrap_or(0.0));
            }
            Some(TelemetryError::ProcessGone(pid)) => {
                log::debug!("tracked process {pid} exited");
            }
            Some(other) => log::warn!("telemetry stopped: {other}"),
            // Scheduled clock ran out: the last poll is the end.
            None => self.end_at = Some(self.last_poll.unwrap_or(0.0)),
        }
        self.ended = true;
    }

    /// Closes the final interval at `now` (or at the workload's own end).
    pub fn finish(&mut self, now: f64) {
        if !self.ended {
            if let Err(e) = self.poll(now) {
                self.end(Some(e));
            }
        }
        let t_end = self.end_at.unwrap_or(now);
        if let Some((t0, gpu0, ram0)) = self.pending.take() {
            let cpu = self.idle_cpu();
            self.push(self.model.compose(&cpu, &gpu0, &ram0, t0));
        }
        let last = self.ledger.lock().unwrap().last_timestamp_s();
        if last.is_none_or(|l| l < t_end) {
            self.push(PowerSample::zero(t_end));
        }
        self.ended = true;
    }
}
