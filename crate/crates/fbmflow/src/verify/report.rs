//! Report rows and persistence. Every experiment serializes to a CSV with the
//! fixed schema
//! `experiment,kind,system,H,x,t,N,paths,estimator,value,stderr,verdict`
//! plus a JSON mirror carrying the config echo and run metadata. Reports are
//! reproducible byte-for-byte from config + seed; the timestamp is the single
//! excluded field and lives only in the JSON.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub kind: String,
    pub system: String,
    pub h: f64,
    pub x: String,
    pub t: f64,
    pub n: usize,
    pub paths: usize,
    pub estimator: String,
    pub value: f64,
    pub stderr: f64,
    pub verdict: String,
}

/// Canonical text form of a starting point for the `x` column.
pub fn format_x(x: &DVector<f64>) -> String {
    x.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Full JSON report: config echo, run metadata, rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub timestamp: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "experiment,kind,system,H,x,t,N,paths,estimator,value,stderr,verdict";

/// CSV text for a row set (header-only when empty). Floats print in shortest
/// round-trip form, so equal runs produce byte-equal files.
pub fn csv_string(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.experiment,
            r.kind,
            r.system,
            r.h,
            r.x,
            r.t,
            r.n,
            r.paths,
            r.estimator,
            r.value,
            r.stderr,
            r.verdict
        ));
    }
    out
}

/// Writes `<base>.csv` and `<base>.json`; returns both paths. IO failures
/// surface verbatim.
pub fn write_report(
    rows: &[ReportRow],
    seed: u64,
    config_echo: serde_json::Value,
    base: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let csv_path = base.with_extension("csv");
    fs::write(&csv_path, csv_string(rows))?;

    let report = Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        seed,
        config: config_echo,
        rows: rows.to_vec(),
    };
    let json_path = base.with_extension("json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    Ok((csv_path, json_path))
}

pub fn read_report_json(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

impl From<serde_json::Error> for crate::error::Error {
    fn from(e: serde_json::Error) -> Self {
        crate::error::Error::Config(format!("JSON: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn row(value: f64) -> ReportRow {
        ReportRow {
            experiment: "unit".into(),
            kind: "test".into(),
            system: "identity2".into(),
            h: 0.75,
            x: "0;0".into(),
            t: 0.5,
            n: 64,
            paths: 100,
            estimator: "semigroup".into(),
            value,
            stderr: 0.01,
            verdict: "pass".into(),
        }
    }

    #[test]
    fn empty_rows_give_header_only_csv() {
        let text = csv_string(&[]);
        assert_eq!(text, format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn json_round_trip_preserves_rows() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("report");
        let rows = vec![row(1.25), row(-0.333333333333333314829616256247)];
        let (_csv, json) =
            write_report(&rows, 42, serde_json::json!({"paths": 100}), &base).unwrap();
        let back = read_report_json(&json).unwrap();
        assert_eq!(back.rows, rows);
        assert_eq!(back.seed, 42);
    }

    #[test]
    fn repeated_writes_identical_modulo_timestamp() {
        let dir = tempdir().unwrap();
        let rows = vec![row(0.1), row(0.2)];
        let (csv_a, json_a) =
            write_report(&rows, 7, serde_json::json!({}), &dir.path().join("a")).unwrap();
        let (csv_b, json_b) =
            write_report(&rows, 7, serde_json::json!({}), &dir.path().join("b")).unwrap();
        assert_eq!(
            std::fs::read_to_string(csv_a).unwrap(),
            std::fs::read_to_string(csv_b).unwrap()
        );
        let strip = |p: &std::path::Path| {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .filter(|l| !l.contains("\"timestamp\""))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&json_a), strip(&json_b));
    }
}
