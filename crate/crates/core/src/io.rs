//! Dataset readers and the canonical writer.
//!
//! Two on-disk formats are understood:
//!
//! * **A** (line-delimited JSON): `{"id": "...", "coords": [[lon, lat], ...]}` per line.
//! * **B** (delimited text): `id,lon1,lat1,lon2,lat2,...` per line.
//!
//! Coordinates on disk are WGS84 degrees and get projected on load. Malformed
//! records are reported with their line number and skipped; the rest of the
//! file still loads.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{project, unproject, Point, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// Line-delimited JSON records.
    A,
    /// Comma-delimited `id,lon,lat,...` rows.
    B,
}

impl Format {
    /// Guess from the file extension: `.csv`/`.txt` are B, everything else A.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => Format::B,
            _ => Format::A,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "jsonl" => Ok(Format::A),
            "b" | "csv" => Ok(Format::B),
            other => Err(Error::config(format!("unknown dataset format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    /// 1-based line number in the source file.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub trajectories: Vec<Trajectory>,
    pub errors: Vec<RecordError>,
}

#[derive(Deserialize)]
struct RecordA {
    id: String,
    coords: Vec<[serde_json::Value; 2]>,
}

fn coord(v: &serde_json::Value) -> std::result::Result<f64, String> {
    v.as_f64()
        .filter(|f| f.is_finite())
        .ok_or_else(|| format!("non-numeric coordinate {v}"))
}

fn project_pairs(pairs: impl Iterator<Item = (f64, f64)>) -> std::result::Result<Vec<Point>, String> {
    pairs
        .map(|(lon, lat)| project(lon, lat).map_err(|e| e.to_string()))
        .collect()
}

fn parse_line_a(line: &str) -> std::result::Result<Trajectory, String> {
    let rec: RecordA = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut pairs = Vec::with_capacity(rec.coords.len());
    for [lon, lat] in &rec.coords {
        pairs.push((coord(lon)?, coord(lat)?));
    }
    Ok(Trajectory::new(rec.id, project_pairs(pairs.into_iter())?))
}

fn parse_record_b(rec: &csv::StringRecord) -> std::result::Result<Trajectory, String> {
    let mut fields = rec.iter();
    let id = fields.next().ok_or("empty record")?.trim().to_string();
    if id.is_empty() {
        return Err("missing id".into());
    }
    let nums = fields
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("non-numeric coordinate '{f}'"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if nums.len() % 2 != 0 {
        return Err(format!("odd number of coordinate columns ({})", nums.len()));
    }
    Ok(Trajectory::new(id, project_pairs(nums.chunks(2).map(|c| (c[0], c[1])))?))
}

/// Parses dataset text already in memory.
pub fn parse_dataset(text: &str, format: Format) -> LoadReport {
    let mut report = LoadReport::default();
    match format {
        Format::A => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match parse_line_a(line) {
                    Ok(t) => report.trajectories.push(t),
                    Err(message) => report.errors.push(RecordError { line: i + 1, message }),
                }
            }
        }
        Format::B => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .from_reader(text.as_bytes());
            for rec in rdr.records() {
                match rec {
                    Ok(rec) => {
                        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                        if rec.iter().all(|f| f.trim().is_empty()) {
                            continue;
                        }
                        match parse_record_b(&rec) {
                            Ok(t) => report.trajectories.push(t),
                            Err(message) => report.errors.push(RecordError { line, message }),
                        }
                    }
                    Err(e) => {
                        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                        report.errors.push(RecordError { line, message: e.to_string() });
                    }
                }
            }
        }
    }
    report
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<LoadReport> {
    let text = fs::read_to_string(path.as_ref())?;
    Ok(parse_dataset(&text, format))
}

/// One canonical format-A line (no trailing newline). `extra` key/value pairs
/// (already JSON-encoded values) are appended after `coords`.
pub fn canonical_line(t: &Trajectory, extra: &[(&str, String)]) -> String {
    let mut s = String::with_capacity(32 + t.points.len() * 26);
    s.push_str("{\"id\":");
    s.push_str(&serde_json::to_string(&t.id).expect("string serializes"));
    s.push_str(",\"coords\":[");
    for (i, p) in t.points.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let (lon, lat) = unproject(*p);
        let _ = write!(s, "[{lon:.7},{lat:.7}]");
    }
    s.push(']');
    for (k, v) in extra {
        let _ = write!(s, ",{}:{v}", serde_json::to_string(k).expect("string serializes"));
    }
    s.push('}');
    s
}

/// Canonical format-A text: fixed key order, 7 decimal places, one record per line.
pub fn to_canonical_string(trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajs {
        out.push_str(&canonical_line(t, &[]));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path.as_ref())?);
    f.write_all(to_canonical_string(trajs).as_bytes())?;
    f.flush()?;
    Ok(())
}
