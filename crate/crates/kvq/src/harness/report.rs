//! Experiment report rows and their CSV / JSON-lines encodings.
//!
//! Rows are append-only records; files written here are deterministic byte
//! streams for a fixed row sequence. The `schema` field versions the row
//! layout in both encodings.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Current row schema version.
pub const REPORT_SCHEMA: &str = "v1";

/// One metric emitted by one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schema: String,
    pub experiment: String,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
    pub units: String,
}

impl ReportRow {
    pub fn new(experiment: &str, config_hash: &str, metric: impl Into<String>, value: f64, units: &str) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            metric: metric.into(),
            value,
            units: units.to_string(),
        }
    }
}

/// Header line for the CSV encoding.
pub const CSV_HEADER: &str = "schema,experiment,config_hash,metric,value,units";

/// Renders rows as CSV with the mandatory header. Fields are plain
/// identifiers and numbers, so no quoting is needed; float formatting is
/// the shortest round-trip form.
pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.schema, r.experiment, r.config_hash, r.metric, r.value, r.units
        );
    }
    out
}

pub fn write_csv<P: AsRef<Path>>(path: P, rows: &[ReportRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(rows_to_csv(rows).as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Renders rows as JSON-lines.
pub fn rows_to_jsonl(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let line = serde_json::to_string(r).expect("plain struct serializes");
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn write_jsonl<P: AsRef<Path>>(path: P, rows: &[ReportRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(rows_to_jsonl(rows).as_bytes())?;
    w.flush()?;
    Ok(())
}
