use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::{read_records, EmissionRecord, EncryptionKey, ReportError};

/// Per-project totals of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub project_name: String,
    pub sessions: usize,
    pub total_duration_s: f64,
    pub total_power_kwh: f64,
    pub total_co2_kg: f64,
    /// `total_power_kwh * kwh_price`, when a price was given.
    pub cost: Option<f64>,
}

/// Sums in millionths, the resolution of the report file. Integer sums are
/// exact, so totals do not depend on record order.
#[derive(Default)]
struct MicroSum(i128);

impl MicroSum {
    fn add(&mut self, v: f64) {
        self.0 += (v * 1e6).round() as i128;
    }

    fn value(&self) -> f64 {
        self.0 as f64 / 1e6
    }
}

#[derive(Default)]
struct Group {
    sessions: usize,
    duration: MicroSum,
    power: MicroSum,
    co2: MicroSum,
}

/// Groups records by project name (rows sorted by name).
pub fn summarize(
    records: &[EmissionRecord],
    kwh_price: Option<f64>,
) -> Result<Vec<SummaryRow>, ReportError> {
    if let Some(price) = kwh_price {
        if !(price.is_finite() && price >= 0.0) {
            return Err(ReportError::InvalidPrice(price));
        }
    }
    let mut groups: BTreeMap<&str, Group> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.project_name.as_str()).or_default();
        g.sessions += 1;
        g.duration.add(r.duration_s);
        g.power.add(r.power_kwh);
        g.co2.add(r.co2_kg);
    }
    Ok(groups
        .into_iter()
        .map(|(name, g)| {
            let power = g.power.value();
            SummaryRow {
                project_name: name.to_string(),
                sessions: g.sessions,
                total_duration_s: g.duration.value(),
                total_power_kwh: power,
                total_co2_kg: g.co2.value(),
                cost: kwh_price.map(|p| power * p),
            }
        })
        .collect())
}

/// Reads a report and summarizes it.
pub fn summary(
    path: impl AsRef<Path>,
    kwh_price: Option<f64>,
    key: Option<&EncryptionKey>,
) -> Result<Vec<SummaryRow>, ReportError> {
    summarize(&read_records(path, key)?, kwh_price)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(project: &str, kwh: f64, co2: f64) -> EmissionRecord {
        EmissionRecord {
            project_name: project.into(),
            experiment_description: String::new(),
            start_time: "2022-01-01 00:00:00".into(),
            duration_s: 60.0,
            power_kwh: kwh,
            co2_kg: co2,
            cpu_name: String::new(),
            gpu_name: String::new(),
            os_name: String::new(),
            country: String::new(),
        }
    }

    #[test]
    fn same_project_sums() {
        let rows = summarize(
            &[rec("emojich", 1.37, 0.33), rec("emojich", 24.50, 5.89)],
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].total_power_kwh, 25.87);
        assert_eq!(rows[0].total_co2_kg, 6.22);
        assert_eq!(rows[0].sessions, 2);
        assert_eq!(rows[0].cost, None);
    }

    #[test]
    fn cost_from_price() {
        let rows = summarize(&[rec("p", 1.37, 0.33), rec("p", 24.50, 5.89)], Some(0.117)).unwrap();
        assert!((rows[0].cost.unwrap() - 3.02679).abs() < 1e-12);
    }

    #[test]
    fn empty_report_empty_summary() {
        assert!(summarize(&[], Some(0.117)).unwrap().is_empty());
    }

    #[test]
    fn distinct_projects_stay_apart() {
        let rows = summarize(
            &[rec("b", 2.0, 1.0), rec("a", 1.0, 0.5), rec("b", 1.0, 0.5)],
            None,
        )
        .unwrap();
        let names: Vec<_> = rows
            .iter()
            .map(|r| (r.project_name.as_str(), r.total_power_kwh))
            .collect();
        assert_eq!(names, vec![("a", 1.0), ("b", 3.0)]);
    }

    #[test]
    fn bad_price_rejected() {
        assert!(summarize(&[], Some(-1.0)).is_err());
        assert!(summarize(&[], Some(f64::NAN)).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            mut micros in prop::collection::vec((0u8..3, 0u64..100_000_000_000), 0..60),
            seed in any::<u64>(),
        ) {
            let records: Vec<_> = micros
                .iter()
                .map(|&(p, m)| rec(&format!("p{p}"), m as f64 / 1e6, m as f64 / 2e6))
                .collect();
            let forward = summarize(&records, Some(0.117)).unwrap();

            // Deterministic shuffle.
            let mut state = seed | 1;
            for i in (1..micros.len()).rev() {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                micros.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let shuffled: Vec<_> = micros
                .iter()
                .map(|&(p, m)| rec(&format!("p{p}"), m as f64 / 1e6, m as f64 / 2e6))
                .collect();
            prop_assert_eq!(summarize(&shuffled, Some(0.117)).unwrap(), forward);
        }
    }
}
