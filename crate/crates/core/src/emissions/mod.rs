//! Regional emission intensity and the energy-to-CO2 conversion.
//!
//! Coefficients are stored in kg CO2 per MWh, keyed by ISO-Alpha-2 code and
//! an optional sub-national region. A lookup tries the exact region, then
//! the country, then [`GLOBAL_AVERAGE_KG_PER_MWH`].

mod geo;

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::LazyLock;

use thiserror::Error;

use crate::energy::EnergyTotals;

#[cfg(feature = "geoip")]
pub use geo::HttpGeoResolver;
pub use geo::{GeoError, GeoResolver, NoGeo, StaticGeo};

/// World average grid intensity, used whenever a region cannot be resolved.
pub const GLOBAL_AVERAGE_KG_PER_MWH: f64 = 436.5;

/// Environment variable holding an ISO-Alpha-2 code (optionally `CC/Region`)
/// that overrides geolocation.
pub const COUNTRY_ENV: &str = "CO2TRACK_COUNTRY";

pub const EMISSION_DB_HEADER: &str = "country_name,iso_a2,iso_a3,un_m49,region_name,kg_per_mwh";

const EMBEDDED: &str = include_str!("../../data/emission_coefficients.csv");

#[derive(Debug, Error)]
pub enum EmissionDbError {
    #[error("emission database line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("emission database line {line}: duplicate entry for {key}")]
    Duplicate { line: u64, key: String },
    #[error("emission database line {line}: coefficient must be positive and finite, got {value}")]
    InvalidCoefficient { line: u64, value: f64 },
    #[error("reading emission database: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmissionsError {
    #[error("PUE must be a finite value >= 1, got {0}")]
    InvalidPue(f64),
    #[error("emission coefficient must be positive and finite, got {0}")]
    InvalidCoefficient(f64),
    #[error("energy totals must be finite and non-negative, got {0} kWh")]
    InvalidEnergy(f64),
    #[error("`{0}` is not an ISO-Alpha-2 country code")]
    InvalidRegion(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionCoefficient {
    pub country_name: String,
    pub iso_a2: String,
    pub iso_a3: String,
    pub un_m49: u16,
    pub region_name: Option<String>,
    pub gamma_kg_per_mwh: f64,
}

impl EmissionCoefficient {
    /// Human-readable place name, e.g. `Canada` or `Canada/Quebec`.
    pub fn place(&self) -> String {
        match &self.region_name {
            Some(region) => format!("{}/{}", self.country_name, region),
            None => self.country_name.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionSource {
    Override,
    NetworkLookup,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRegion {
    /// Upper-case ISO-Alpha-2 code; `None` only for the fallback.
    pub iso_a2: Option<String>,
    pub region_name: Option<String>,
    pub source: RegionSource,
}

impl ResolvedRegion {
    pub fn fallback() -> Self {
        ResolvedRegion {
            iso_a2: None,
            region_name: None,
            source: RegionSource::Fallback,
        }
    }

    /// Parses `CC` or `CC/Region Name`.
    pub fn parse(spec: &str, source: RegionSource) -> Result<Self, EmissionsError> {
        let (code, region) = match spec.split_once('/') {
            Some((code, region)) => (code.trim(), Some(region.trim())),
            None => (spec.trim(), None),
        };
        if code.len() != 2 || !code.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(EmissionsError::InvalidRegion(spec.to_string()));
        }
        Ok(ResolvedRegion {
            iso_a2: Some(code.to_ascii_uppercase()),
            region_name: region.filter(|r| !r.is_empty()).map(str::to_string),
            source,
        })
    }

    /// Label written to reports for this region when no database row names it.
    pub fn label(&self) -> String {
        match (&self.iso_a2, &self.region_name) {
            (Some(code), Some(region)) => format!("{code}/{region}"),
            (Some(code), None) => code.clone(),
            (None, _) => "unknown".to_string(),
        }
    }
}

/// Picks the session region: an explicit override wins, then one query to
/// the geolocation client, then the fallback. Only a malformed override is
/// an error; lookup failures degrade silently.
pub fn resolve_region(
    override_spec: Option<&str>,
    resolver: &dyn GeoResolver,
) -> Result<ResolvedRegion, EmissionsError> {
    if let Some(spec) = override_spec.filter(|s| !s.trim().is_empty()) {
        return ResolvedRegion::parse(spec, RegionSource::Override);
    }
    match resolver.locate() {
        Ok(code) => match ResolvedRegion::parse(&code, RegionSource::NetworkLookup) {
            Ok(region) => Ok(region),
            Err(_) => {
                log::warn!("geolocation returned `{code}`, using the global average");
                Ok(ResolvedRegion::fallback())
            }
        },
        Err(e) => {
            log::info!("geolocation unavailable ({e}), using the global average");
            Ok(ResolvedRegion::fallback())
        }
    }
}

fn key(iso_a2: &str, region: Option<&str>) -> (String, Option<String>) {
    (
        iso_a2.to_ascii_uppercase(),
        region.map(|r| r.trim().to_lowercase()),
    )
}

#[derive(Debug, Clone)]
pub struct EmissionDatabase {
    rows: Vec<EmissionCoefficient>,
    index: HashMap<(String, Option<String>), usize>,
}

impl EmissionDatabase {
    pub fn embedded() -> Self {
        static DB: LazyLock<EmissionDatabase> = LazyLock::new(|| {
            EmissionDatabase::from_reader(EMBEDDED.as_bytes())
                .expect("embedded emission table is valid")
        });
        DB.clone()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, EmissionDbError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, EmissionDbError> {
        let mut csv = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = csv.headers().map_err(|e| EmissionDbError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>().join(",") != EMISSION_DB_HEADER {
            return Err(EmissionDbError::Parse {
                line: 1,
                message: format!("expected header `{EMISSION_DB_HEADER}`"),
            });
        }

        let mut rows = Vec::new();
        let mut index = HashMap::new();
        for record in csv.records() {
            let record = record.map_err(|e| EmissionDbError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let parse_err = |field: &str, e: &dyn std::fmt::Display| EmissionDbError::Parse {
                line,
                message: format!("{field}: {e}"),
            };
            let iso_a2 = record[1].to_ascii_uppercase();
            if iso_a2.len() != 2 {
                return Err(parse_err("iso_a2", &"expected a 2-letter code"));
            }
            let gamma: f64 = record[5].parse().map_err(|e| parse_err("kg_per_mwh", &e))?;
            if !(gamma.is_finite() && gamma > 0.0) {
                return Err(EmissionDbError::InvalidCoefficient { line, value: gamma });
            }
            let region_name = Some(record[4].to_string()).filter(|r| !r.is_empty());
            let row = EmissionCoefficient {
                country_name: record[0].to_string(),
                iso_a2,
                iso_a3: record[2].to_ascii_uppercase(),
                un_m49: record[3].parse().map_err(|e| parse_err("un_m49", &e))?,
                region_name,
                gamma_kg_per_mwh: gamma,
            };
            let k = key(&row.iso_a2, row.region_name.as_deref());
            if index.contains_key(&k) {
                return Err(EmissionDbError::Duplicate {
                    line,
                    key: row.place(),
                });
            }
            index.insert(k, rows.len());
            rows.push(row);
        }
        Ok(EmissionDatabase { rows, index })
    }

    pub fn rows(&self) -> &[EmissionCoefficient] {
        &self.rows
    }

    /// Most specific row for a region: the region itself, else its country.
    pub fn coefficient(&self, region: &ResolvedRegion) -> Option<&EmissionCoefficient> {
        let code = region.iso_a2.as_deref()?;
        let exact = region
            .region_name
            .as_deref()
            .and_then(|r| self.index.get(&key(code, Some(r))));
        exact
            .or_else(|| self.index.get(&key(code, None)))
            .map(|&i| &self.rows[i])
    }

    /// kg CO2 per MWh; total over all inputs.
    pub fn lookup_gamma(&self, region: &ResolvedRegion) -> f64 {
        self.coefficient(region)
            .map_or(GLOBAL_AVERAGE_KG_PER_MWH, |c| c.gamma_kg_per_mwh)
    }
}

impl Default for EmissionDatabase {
    fn default() -> Self {
        Self::embedded()
    }
}

/// kg/MWh to kg/kWh.
fn kg_per_kwh(gamma_kg_per_mwh: f64) -> f64 {
    gamma_kg_per_mwh / 1000.0
}

/// Equivalent CO2 in kg: intensity times PUE times total energy.
pub fn carbon_footprint(
    totals: &EnergyTotals,
    gamma_kg_per_mwh: f64,
    pue: f64,
) -> Result<f64, EmissionsError> {
    validate_pue(pue)?;
    if !(gamma_kg_per_mwh.is_finite() && gamma_kg_per_mwh > 0.0) {
        return Err(EmissionsError::InvalidCoefficient(gamma_kg_per_mwh));
    }
    if !(totals.total_kwh.is_finite() && totals.total_kwh >= 0.0) {
        return Err(EmissionsError::InvalidEnergy(totals.total_kwh));
    }
    Ok(kg_per_kwh(gamma_kg_per_mwh) * pue * totals.total_kwh)
}

pub fn validate_pue(pue: f64) -> Result<(), EmissionsError> {
    if pue.is_finite() && pue >= 1.0 {
        Ok(())
    } else {
        Err(EmissionsError::InvalidPue(pue))
    }
}
