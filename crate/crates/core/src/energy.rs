//! Integration of power samples into per-subsystem energy.
//!
//! Zero-order hold: each sample's power is held until the next sample
//! arrives, so a sample adds energy for the interval *before* it using the
//! power of its predecessor. Piecewise-constant signals whose breakpoints
//! coincide with sample times integrate exactly.

use thiserror::Error;

use crate::telemetry::PowerSample;

const JOULES_PER_KWH: f64 = 3_600_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("sample at t={got}s does not follow previous sample at t={last}s")]
    NonMonotonicTimestamp { last: f64, got: f64 },
    #[error("sample at t={0}s has a negative or non-finite reading")]
    InvalidSample(f64),
}

/// Running energy integrals of one session.
///
/// Integrals are kept in watt-seconds so that integer power and time steps
/// sum without rounding; the accessors report kWh.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyLedger {
    cpu_ws: f64,
    gpu_ws: f64,
    ram_ws: f64,
    last: Option<PowerSample>,
    sample_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyTotals {
    pub cpu_kwh: f64,
    pub gpu_kwh: f64,
    pub ram_kwh: f64,
    pub total_kwh: f64,
    pub duration_s: f64,
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, sample: PowerSample) -> Result<(), LedgerError> {
        if !sample.is_valid() {
            return Err(LedgerError::InvalidSample(sample.timestamp_s));
        }
        if let Some(prev) = self.last {
            if sample.timestamp_s <= prev.timestamp_s {
                return Err(LedgerError::NonMonotonicTimestamp {
                    last: prev.timestamp_s,
                    got: sample.timestamp_s,
                });
            }
            let dt = sample.timestamp_s - prev.timestamp_s;
            self.cpu_ws += prev.cpu_watts * dt;
            self.gpu_ws += prev.gpu_watts * dt;
            self.ram_ws += prev.ram_watts * dt;
        }
        self.last = Some(sample);
        self.sample_count += 1;
        Ok(())
    }

    pub fn cpu_kwh(&self) -> f64 {
        self.cpu_ws / JOULES_PER_KWH
    }

    pub fn gpu_kwh(&self) -> f64 {
        self.gpu_ws / JOULES_PER_KWH
    }

    pub fn ram_kwh(&self) -> f64 {
        self.ram_ws / JOULES_PER_KWH
    }

    pub fn total_kwh(&self) -> f64 {
        (self.cpu_ws + self.gpu_ws + self.ram_ws) / JOULES_PER_KWH
    }

    pub fn last_timestamp_s(&self) -> Option<f64> {
        self.last.map(|s| s.timestamp_s)
    }

    pub fn last_sample(&self) -> Option<PowerSample> {
        self.last
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn finalize(&self) -> EnergyTotals {
        EnergyTotals {
            cpu_kwh: self.cpu_kwh(),
            gpu_kwh: self.gpu_kwh(),
            ram_kwh: self.ram_kwh(),
            total_kwh: self.total_kwh(),
            duration_s: self.last_timestamp_s().unwrap_or(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(t: f64, cpu: f64, gpu: f64, ram: f64) -> PowerSample {
        PowerSample {
            timestamp_s: t,
            cpu_watts: cpu,
            gpu_watts: gpu,
            ram_watts: ram,
        }
    }

    /// Exact energy of a step function, in kWh, from rational arithmetic on
    /// integer watts and seconds.
    fn oracle_kwh(steps: &[(u64, u64)]) -> f64 {
        let joules: u128 = steps
            .iter()
            .map(|&(w, dt)| u128::from(w) * u128::from(dt))
            .sum();
        joules as f64 / 3_600_000.0
    }

    #[test]
    fn constant_gpu_for_four_hours() {
        let mut l = EnergyLedger::new();
        for minute in 0..=240 {
            l.accumulate(sample(f64::from(minute) * 60.0, 0.0, 250.0, 0.0))
                .unwrap();
        }
        assert_eq!(l.gpu_kwh(), 1.0);
        assert_eq!(l.gpu_kwh(), oracle_kwh(&[(250, 4 * 3600)]));
    }

    #[test]
    fn first_sample_only_sets_origin() {
        let mut l = EnergyLedger::new();
        l.accumulate(sample(0.0, 100.0, 300.0, 5.0)).unwrap();
        assert_eq!(l.total_kwh(), 0.0);
        assert_eq!(l.last_timestamp_s(), Some(0.0));
        assert_eq!(l.sample_count(), 1);
    }

    #[test]
    fn cpu_and_ram_for_two_hours() {
        let mut l = EnergyLedger::new();
        l.accumulate(sample(0.0, 50.0, 0.0, 6.0)).unwrap();
        l.accumulate(sample(3600.0, 50.0, 0.0, 6.0)).unwrap();
        l.accumulate(sample(7200.0, 50.0, 0.0, 6.0)).unwrap();
        assert!((l.cpu_kwh() - 0.100).abs() < 1e-15);
        assert!((l.ram_kwh() - 0.012).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_increasing_time() {
        let mut l = EnergyLedger::new();
        l.accumulate(sample(5.0, 1.0, 1.0, 1.0)).unwrap();
        assert!(matches!(
            l.accumulate(sample(5.0, 1.0, 1.0, 1.0)),
            Err(LedgerError::NonMonotonicTimestamp { .. })
        ));
        assert!(l.accumulate(sample(4.0, 1.0, 1.0, 1.0)).is_err());
        assert!(l.accumulate(sample(6.0, -1.0, 1.0, 1.0)).is_err());
        assert_eq!(l.sample_count(), 1);
    }

    #[test]
    fn empty_session_totals() {
        assert_eq!(EnergyLedger::new().finalize(), EnergyTotals::default());
    }

    #[test]
    fn totals_sum_parts() {
        // 0.100 + 1.000 + 0.012 kWh held for one hour each.
        let mut l = EnergyLedger::new();
        l.accumulate(sample(0.0, 100.0, 1000.0, 12.0)).unwrap();
        l.accumulate(sample(3600.0, 0.0, 0.0, 0.0)).unwrap();
        let t = l.finalize();
        assert_eq!((t.cpu_kwh, t.gpu_kwh, t.ram_kwh), (0.1, 1.0, 0.012));
        assert!((t.total_kwh - 1.112).abs() < 1e-15);
        assert_eq!(t.duration_s, 3600.0);
    }

    fn arb_steps() -> impl Strategy<Value = Vec<(u64, u64, u64, u64)>> {
        // (cpu W, gpu W, ram W, seconds held)
        prop::collection::vec((0u64..500, 0u64..2000, 0u64..100, 1u64..7200), 1..40)
    }

    fn ledger_for(steps: &[(u64, u64, u64, u64)]) -> EnergyLedger {
        let mut l = EnergyLedger::new();
        let mut t = 0u64;
        for &(c, g, r, dt) in steps {
            l.accumulate(sample(t as f64, c as f64, g as f64, r as f64))
                .unwrap();
            t += dt;
        }
        l.accumulate(sample(t as f64, 0.0, 0.0, 0.0)).unwrap();
        l
    }

    proptest! {
        #[test]
        fn piecewise_constant_is_exact(steps in arb_steps()) {
            let l = ledger_for(&steps);
            let gpu: Vec<_> = steps.iter().map(|s| (s.1, s.3)).collect();
            let cpu: Vec<_> = steps.iter().map(|s| (s.0, s.3)).collect();
            prop_assert_eq!(l.gpu_kwh(), oracle_kwh(&gpu));
            prop_assert_eq!(l.cpu_kwh(), oracle_kwh(&cpu));
        }

        #[test]
        fn never_decreases(samples in prop::collection::vec((0.001f64..1e4, 0f64..1e3, 0f64..1e3, 0f64..1e3), 1..50)) {
            let mut l = EnergyLedger::new();
            let mut t = 0.0;
            let mut prev = (0.0, 0.0, 0.0);
            for (dt, c, g, r) in samples {
                l.accumulate(sample(t, c, g, r)).unwrap();
                let now = (l.cpu_kwh(), l.gpu_kwh(), l.ram_kwh());
                prop_assert!(now.0 >= prev.0 && now.1 >= prev.1 && now.2 >= prev.2);
                prev = now;
                t += dt;
            }
        }

        #[test]
        fn zero_power_is_zero_energy(times in prop::collection::vec(0.01f64..1e6, 1..30)) {
            let mut l = EnergyLedger::new();
            let mut t = 0.0;
            for dt in times {
                l.accumulate(PowerSample::zero(t)).unwrap();
                t += dt;
            }
            prop_assert_eq!(l.total_kwh(), 0.0);
        }
    }
}
