//! Processor TDP lookup by model name.
//!
//! The embedded table maps vendor model names to thermal design power.
//! OS-reported names carry trademark glyphs and clock suffixes, so both
//! sides are normalized before comparison. When nothing matches with
//! enough confidence the lookup falls back to [`FALLBACK_TDP_WATTS`].

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

/// TDP assumed for a processor missing from the database.
pub const FALLBACK_TDP_WATTS: f64 = 100.0;

/// Minimum share of a candidate's tokens that must appear in the query.
pub const MATCH_THRESHOLD: f64 = 0.8;

pub const CPU_DB_HEADER: &str = "model,tdp_watts";

const EMBEDDED: &str = include_str!("../data/cpu_tdp.csv");

/// Tokens too generic to count towards a match.
const NOISE_TOKENS: &[&str] = &["processor", "cpu"];

static GLYPHS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\((?:r|tm|c)\)|[®™©]").unwrap());
static CLOCK_SUFFIX: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"@\s*[0-9]+(?:\.[0-9]+)?\s*[gm]hz").unwrap());

#[derive(Debug, Error)]
pub enum CpuDbError {
    #[error("cpu database line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("cpu database line {line}: duplicate model `{model}`")]
    Duplicate { line: u64, model: String },
    #[error("cpu database line {line}: TDP must be positive and finite, got {value}")]
    InvalidTdp { line: u64, value: f64 },
    #[error("reading cpu database: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuSpec {
    /// Normalized model name.
    pub model_name: String,
    pub tdp_watts: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    Exact,
    Fuzzy,
    Unmatched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdpLookup {
    pub tdp_watts: f64,
    pub kind: MatchKind,
    /// Database key that matched, if any.
    pub model: Option<String>,
}

impl TdpLookup {
    pub fn matched(&self) -> bool {
        self.kind != MatchKind::Unmatched
    }
}

/// Lowercases, drops trademark glyphs and clock-frequency suffixes, and
/// collapses whitespace.
pub fn normalize_model(raw: &str) -> String {
    let mut current = raw.to_string();
    // A removal can splice together a new glyph, e.g. "(t(r)m)".
    for _ in 0..8 {
        let lowered = current.to_lowercase();
        let no_glyphs = GLYPHS.replace_all(&lowered, " ");
        let no_clock = CLOCK_SUFFIX.replace_all(&no_glyphs, " ");
        let next = no_clock.split_whitespace().collect::<Vec<_>>().join(" ");
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn tokens(normalized: &str) -> Vec<&str> {
    normalized
        .split(' ')
        .filter(|t| !t.is_empty() && !NOISE_TOKENS.contains(t))
        .collect()
}

#[derive(Debug, Clone)]
pub struct CpuDatabase {
    entries: BTreeMap<String, CpuSpec>,
}

impl CpuDatabase {
    /// The table compiled into the crate.
    pub fn embedded() -> Self {
        static DB: LazyLock<CpuDatabase> = LazyLock::new(|| {
            CpuDatabase::from_reader(EMBEDDED.as_bytes()).expect("embedded cpu table is valid")
        });
        DB.clone()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, CpuDbError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, CpuDbError> {
        let mut csv = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = csv.headers().map_err(|e| CpuDbError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>().join(",") != CPU_DB_HEADER {
            return Err(CpuDbError::Parse {
                line: 1,
                message: format!("expected header `{CPU_DB_HEADER}`"),
            });
        }

        let mut entries = BTreeMap::new();
        for record in csv.records() {
            let record = record.map_err(|e| CpuDbError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let model = normalize_model(&record[0]);
            let tdp: f64 = record[1].parse().map_err(|e| CpuDbError::Parse {
                line,
                message: format!("tdp_watts: {e}"),
            })?;
            if !(tdp.is_finite() && tdp > 0.0) {
                return Err(CpuDbError::InvalidTdp { line, value: tdp });
            }
            if model.is_empty() {
                return Err(CpuDbError::Parse {
                    line,
                    message: "empty model name".into(),
                });
            }
            if entries.contains_key(&model) {
                return Err(CpuDbError::Duplicate { line, model });
            }
            entries.insert(
                model.clone(),
                CpuSpec {
                    model_name: model,
                    tdp_watts: tdp,
                },
            );
        }
        Ok(CpuDatabase { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CpuSpec> {
        self.entries.values()
    }

    /// Never fails: unknown processors get [`FALLBACK_TDP_WATTS`].
    pub fn lookup_tdp(&self, raw_name: &str) -> TdpLookup {
        let query = normalize_model(raw_name);
        if let Some(spec) = self.entries.get(&query) {
            return TdpLookup {
                tdp_watts: spec.tdp_watts,
                kind: MatchKind::Exact,
                model: Some(spec.model_name.clone()),
            };
        }

        let query_tokens: HashSet<&str> = tokens(&query).into_iter().collect();
        let mut best: Option<(usize, f64, &CpuSpec)> = None;
        for spec in self.entries.values() {
            let cand = tokens(&spec.model_name);
            if cand.is_empty() {
                continue;
            }
            // Model numbers must all be present; "8380" never stands in for "8380h".
            let numbers_present = cand
                .iter()
                .filter(|t| t.chars().any(|c| c.is_ascii_digit()))
                .all(|t| query_tokens.contains(t));
            if !numbers_present {
                continue;
            }
            let overlap = cand.iter().filter(|t| query_tokens.contains(*t)).count();
            let score = overlap as f64 / cand.len() as f64;
            if score < MATCH_THRESHOLD {
                continue;
            }
            let better = match best {
                None => true,
                Some((o, s, _)) => (overlap, score) > (o, s),
            };
            if better {
                best = Some((overlap, score, spec));
            }
        }

        match best {
            Some((_, _, spec)) => TdpLookup {
                tdp_watts: spec.tdp_watts,
                kind: MatchKind::Fuzzy,
                model: Some(spec.model_name.clone()),
            },
            None => TdpLookup {
                tdp_watts: FALLBACK_TDP_WATTS,
                kind: MatchKind::Unmatched,
                model: None,
            },
        }
    }
}

impl Default for CpuDatabase {
    fn default() -> Self {
        Self::embedded()
    }
}
