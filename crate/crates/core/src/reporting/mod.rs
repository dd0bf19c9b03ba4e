//! The emission report: an append-only CSV file with one row per session.
//!
//! Numeric fields are written with six decimals and a `.` separator
//! regardless of locale. In encrypted mode every cell of a data row is
//! sealed (see [`crypto`]); the header stays readable. A file is either
//! entirely plaintext or entirely encrypted.

pub mod crypto;
mod summary;

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crypto::EncryptionKey;
pub use summary::{summarize, summary, SummaryRow};

use crypto::{cell_salt, is_encrypted_cell, random_salt, CellError};

pub const REPORT_COLUMNS: [&str; 10] = [
    "project_name",
    "experiment_description",
    "start_time",
    "duration(s)",
    "power_consumption(kWh)",
    "CO2_emissions(kg)",
    "CPU_name",
    "GPU_name",
    "OS",
    "country",
];

/// Civil time layout of the `start_time` column.
pub const START_TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Environment variable holding the report passphrase.
pub const PASSPHRASE_ENV: &str = "CO2TRACK_PASSPHRASE";

pub fn report_header() -> String {
    REPORT_COLUMNS.join(",")
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report I/O: {0}")]
    Io(#[from] io::Error),
    #[error("encryption failed: {0}")]
    Encryption(String),
    #[error("line {line}: cannot decrypt: {reason}")]
    Decrypt { line: u64, reason: String },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("kWh price must be finite and non-negative, got {0}")]
    InvalidPrice(f64),
}

fn parse_err(line: u64, message: impl Into<String>) -> ReportError {
    ReportError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub project_name: String,
    pub experiment_description: String,
    /// Local civil time, `yyyy-mm-dd hh:mm:ss`.
    pub start_time: String,
    pub duration_s: f64,
    pub power_kwh: f64,
    pub co2_kg: f64,
    pub cpu_name: String,
    pub gpu_name: String,
    pub os_name: String,
    pub country: String,
}

pub(crate) fn fmt_number(v: f64) -> String {
    let s = format!("{v:.6}");
    // "-0.000000" would otherwise leak out of tiny negative rounding noise.
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

impl EmissionRecord {
    pub fn to_fields(&self) -> [String; 10] {
        [
            self.project_name.clone(),
            self.experiment_description.clone(),
            self.start_time.clone(),
            fmt_number(self.duration_s),
            fmt_number(self.power_kwh),
            fmt_number(self.co2_kg),
            self.cpu_name.clone(),
            self.gpu_name.clone(),
            self.os_name.clone(),
            self.country.clone(),
        ]
    }

    fn from_fields(fields: &[String], line: u64) -> Result<Self, ReportError> {
        let num = |i: usize| -> Result<f64, ReportError> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|e| parse_err(line, format!("{}: {e}", REPORT_COLUMNS[i])))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(parse_err(
                    line,
                    format!("{} must be finite and non-negative", REPORT_COLUMNS[i]),
                ));
            }
            Ok(v)
        };
        Ok(EmissionRecord {
            project_name: fields[0].clone(),
            experiment_description: fields[1].clone(),
            start_time: fields[2].clone(),
            duration_s: num(3)?,
            power_kwh: num(4)?,
            co2_kg: num(5)?,
            cpu_name: fields[6].clone(),
            gpu_name: fields[7].clone(),
            os_name: fields[8].clone(),
            country: fields[9].clone(),
        })
    }

    /// The record exactly as a reader of the report file would see it.
    pub fn as_written(&self) -> Self {
        let line = self.to_fields();
        Self::from_fields(&line, 0).expect("formatted record parses")
    }
}

fn csv_line(fields: &[String]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields)
        .map_err(|e| ReportError::Io(io::Error::other(e)))?;
    w.into_inner()
        .map_err(|e| ReportError::Io(io::Error::other(e.to_string())))
}

/// Mode of an existing report, judged from its first data row.
enum FileMode {
    Empty,
    Plain,
    Encrypted(crypto::Salt, String),
}

fn existing_mode(file: &mut File) -> Result<FileMode, ReportError> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&mut *file);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    if header.trim_end_matches(['\r', '\n']) != report_header() {
        return Err(parse_err(
            1,
            "file exists but does not start with the report header",
        ));
    }
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(reader);
    let mut first = csv::StringRecord::new();
    let got = csv
        .read_record(&mut first)
        .map_err(|e| parse_err(2, e.to_string()))?;
    if !got {
        return Ok(FileMode::Empty);
    }
    match first.get(0) {
        Some(cell) if is_encrypted_cell(cell) => {
            let salt = cell_salt(cell).map_err(|e| ReportError::Decrypt {
                line: 2,
                reason: e.to_string(),
            })?;
            Ok(FileMode::Encrypted(salt, cell.to_string()))
        }
        _ => Ok(FileMode::Plain),
    }
}

/// Appends one record, writing the header first if the file is new.
///
/// The file is held under an exclusive lock for the duration of the write,
/// so concurrent writers never interleave partial rows.
pub fn append_record(
    path: impl AsRef<Path>,
    record: &EmissionRecord,
    key: Option<&EncryptionKey>,
) -> Result<(), ReportError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)?;
    file.lock()?;

    let mut out = Vec::new();
    let mode = if file.metadata()?.len() == 0 {
        out.extend_from_slice(report_header().as_bytes());
        out.push(b'\n');
        FileMode::Empty
    } else {
        existing_mode(&mut file)?
    };

    let fields = record.to_fields();
    let row = match (key, mode) {
        (None, FileMode::Encrypted(..)) => {
            return Err(ReportError::Encryption(
                "report is encrypted; a passphrase is required to append".into(),
            ))
        }
        (Some(_), FileMode::Plain) => {
            return Err(ReportError::Encryption(
                "report holds plaintext rows; encrypted rows cannot be mixed in".into(),
            ))
        }
        (None, _) => fields.to_vec(),
        (Some(key), mode) => {
            let salt = match mode {
                FileMode::Encrypted(salt, probe) => {
                    key.decrypt_cell(REPORT_COLUMNS[0], &probe).map_err(|_| {
                        ReportError::Encryption(
                            "passphrase does not match the existing report".into(),
                        )
                    })?;
                    salt
                }
                _ => random_salt(),
            };
            fields
                .iter()
                .zip(REPORT_COLUMNS)
                .map(|(value, column)| key.encrypt_cell(&salt, column, value))
                .collect()
        }
    };
    out.extend_from_slice(&csv_line(&row)?);
    file.write_all(&out)?;
    file.flush()?;
    Ok(())
}

/// Reads every record back. Encrypted reports need the key they were
/// written with.
pub fn read_records(
    path: impl AsRef<Path>,
    key: Option<&EncryptionKey>,
) -> Result<Vec<EmissionRecord>, ReportError> {
    let file = File::open(path)?;
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let header = csv.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != REPORT_COLUMNS {
        return Err(parse_err(
            1,
            format!("expected header `{}`", report_header()),
        ));
    }

    let mut records = Vec::new();
    let mut encrypted: Option<bool> = None;
    for row in csv.records() {
        let row =
            row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != REPORT_COLUMNS.len() {
            return Err(parse_err(
                line,
                format!(
                    "expected {} fields, found {}",
                    REPORT_COLUMNS.len(),
                    row.len()
                ),
            ));
        }
        let row_encrypted = row.iter().any(is_encrypted_cell);
        if row_encrypted && !row.iter().all(is_encrypted_cell) {
            return Err(parse_err(line, "row mixes encrypted and plaintext cells"));
        }
        match encrypted {
            None => encrypted = Some(row_encrypted),
            Some(mode) if mode != row_encrypted => {
                return Err(parse_err(line, "report mixes encrypted and plaintext rows"))
            }
            _ => {}
        }

        let fields: Vec<String> = if row_encrypted {
            let key = key.ok_or_else(|| ReportError::Decrypt {
                line,
                reason: "report is encrypted and no passphrase was given".into(),
            })?;
            row.iter()
                .zip(REPORT_COLUMNS)
                .map(|(cell, column)| {
                    key.decrypt_cell(column, cell)
                        .map_err(|e: CellError| ReportError::Decrypt {
                            line,
                            reason: e.to_string(),
                        })
                })
                .collect::<Result<_, _>>()?
        } else {
            row.iter().map(str::to_string).collect()
        };
        records.push(EmissionRecord::from_fields(&fields, line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn record(project: &str, kwh: f64) -> EmissionRecord {
        EmissionRecord {
            project_name: project.into(),
            experiment_description: "fine-tuning, fp16".into(),
            start_time: "2022-08-01 10:00:00".into(),
            duration_s: 15540.0,
            power_kwh: kwh,
            co2_kg: kwh * 0.2409,
            cpu_name: "AMD EPYC 7742 64-Core Processor".into(),
            gpu_name: "A100-SXM4-40GB".into(),
            os_name: "Linux 5.15".into(),
            country: "Russia".into(),
        }
    }

    #[test]
    fn header_text_is_exact() {
        assert_eq!(
            report_header(),
            "project_name,experiment_description,start_time,duration(s),power_consumption(kWh),CO2_emissions(kg),CPU_name,GPU_name,OS,country"
        );
    }

    #[test]
    fn first_write_adds_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emission.csv");
        append_record(&path, &record("a", 1.37), None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], report_header());
        assert!(lines[1].contains(",1.370000,0.330033,"), "{}", lines[1]);
        assert!(lines[1].contains("\"fine-tuning, fp16\""));
    }

    #[test]
    fn appends_preserve_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nested/out.csv");
        append_record(&path, &record("first", 1.0), None).unwrap();
        append_record(&path, &record("second", 2.0), None).unwrap();
        let back = read_records(&path, None).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].project_name, "first");
        assert_eq!(back[1], record("second", 2.0).as_written());
    }

    #[test]
    fn header_only_reads_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, format!("{}\n", report_header())).unwrap();
        assert!(read_records(&path, None).unwrap().is_empty());
        append_record(&path, &record("x", 0.5), None).unwrap();
        assert_eq!(read_records(&path, None).unwrap().len(), 1);
    }

    #[test]
    fn encrypted_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("encoded_emissions.csv");
        let key = EncryptionKey::new("pass").unwrap();
        let r = record("Test_1", 24.5);
        append_record(&path, &r, Some(&key)).unwrap();
        append_record(&path, &record("Test_2", 1.0), Some(&key)).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&report_header()));
        assert!(!text.contains("Test_1") && !text.contains("EPYC"));

        let back = read_records(&path, Some(&key)).unwrap();
        assert_eq!(back[0], r.as_written());
        assert_eq!(back[1].project_name, "Test_2");
    }

    #[test]
    fn encrypted_without_key_fails() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let key = EncryptionKey::new("pass").unwrap();
        append_record(&path, &record("p", 1.0), Some(&key)).unwrap();
        assert!(matches!(
            read_records(&path, None),
            Err(ReportError::Decrypt { line: 2, .. })
        ));
        let wrong = EncryptionKey::new("nope").unwrap();
        assert!(matches!(
            read_records(&path, Some(&wrong)),
            Err(ReportError::Decrypt { .. })
        ));
        assert!(matches!(
            append_record(&path, &record("p", 1.0), Some(&wrong)),
            Err(ReportError::Encryption(_))
        ));
        assert!(append_record(&path, &record("p", 1.0), None).is_err());
    }

    #[test]
    fn modes_cannot_mix() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.csv");
        append_record(&path, &record("p", 1.0), None).unwrap();
        let key = EncryptionKey::new("pass").unwrap();
        assert!(append_record(&path, &record("p", 1.0), Some(&key)).is_err());
        // A plaintext report reads fine even when a key is supplied.
        assert_eq!(read_records(&path, Some(&key)).unwrap().len(), 1);

        let enc_row = {
            let enc_path = dir.path().join("enc.csv");
            append_record(&enc_path, &record("q", 1.0), Some(&key)).unwrap();
            std::fs::read_to_string(&enc_path)
                .unwrap()
                .lines()
                .nth(1)
                .unwrap()
                .to_string()
        };
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str(&enc_row);
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_records(&path, Some(&key)),
            Err(ReportError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let good = csv_line(&record("ok", 1.0).to_fields()).unwrap();
        let mut text = format!("{}\n", report_header()).into_bytes();
        text.extend_from_slice(&good);
        text.extend_from_slice(b"p,d,2022-01-01 00:00:00,abc,1,1,c,g,o,x\n");
        std::fs::write(&path, &text).unwrap();
        match read_records(&path, None) {
            Err(ReportError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("duration"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "a,b,c\n").unwrap();
        assert!(matches!(
            read_records(&path, None),
            Err(ReportError::Parse { line: 1, .. })
        ));
        std::fs::write(&path, format!("{}\nshort,row\n", report_header())).unwrap();
        assert!(matches!(
            read_records(&path, None),
            Err(ReportError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn appending_to_foreign_file_is_refused() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("notes.csv");
        std::fs::write(&path, "something,else\n").unwrap();
        assert!(append_record(&path, &record("p", 1.0), None).is_err());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "something,else\n");
    }

    #[test]
    fn concurrent_appends_do_not_interleave() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("shared.csv");
        std::thread::scope(|s| {
            for t in 0..4 {
                let path = &path;
                s.spawn(move || {
                    for i in 0..25 {
                        append_record(path, &record(&format!("t{t}-{i}"), f64::from(i)), None)
                            .unwrap();
                    }
                });
            }
        });
        let back = read_records(&path, None).unwrap();
        assert_eq!(back.len(), 100);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches(&report_header()).count(), 1);
    }

    #[test]
    fn numbers_are_fixed_point() {
        assert_eq!(fmt_number(1.0), "1.000000");
        assert_eq!(fmt_number(0.4365), "0.436500");
        assert_eq!(fmt_number(1234567.5), "1234567.500000");
        assert_eq!(fmt_number(-1e-12), "0.000000");
    }
}
