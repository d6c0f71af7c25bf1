//! `metrics.csv`: one row per run, fixed column order.

use std::fs::OpenOptions;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA: u32 = 1;

pub const COLUMNS: [&str; 13] = [
    "schema",
    "run",
    "config_hash",
    "guidance",
    "schedule",
    "seed",
    "scenes",
    "nfe",
    "wall_clock_s",
    "token_steps",
    "speedup",
    "sample_mse",
    "distill_ratio",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema: u32,
    pub run: String,
    pub config_hash: String,
    pub guidance: String,
    pub schedule: String,
    pub seed: u64,
    pub scenes: usize,
    /// Function evaluations per sample.
    pub nfe: usize,
    pub wall_clock_s: f64,
    /// Token steps per sample.
    pub token_steps: usize,
    pub speedup: Option<f64>,
    pub sample_mse: Option<f64>,
    pub distill_ratio: Option<f64>,
}

impl MetricsRow {
    pub fn new(run: &str, config_hash: &str, guidance: &str, seed: u64) -> Self {
        Self {
            schema: SCHEMA,
            run: run.to_string(),
            config_hash: config_hash.to_string(),
            guidance: guidance.to_string(),
            schedule: String::new(),
            seed,
            scenes: 0,
            nfe: 0,
            wall_clock_s: 0.0,
            token_steps: 0,
            speedup: None,
            sample_mse: None,
            distill_ratio: None,
        }
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(COLUMNS) {
        bail!("metrics header does not match schema {SCHEMA}");
    }
    let rows = r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?;
    if let Some(row) = rows.iter().find(|row| row.schema != SCHEMA) {
        bail!("metrics row {} has schema {}", row.run, row.schema);
    }
    Ok(rows)
}

/// Appends rows, writing the header when the file is new and refusing a file
/// whose header differs.
pub fn append(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    if exists {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        from_csv(&text)?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        w.write_record(COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
