//! On-disk formats written and read by the commands.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces the in-memory values exactly.

use std::fs::File;
use std::path::Path;

use fwm_core::correlation::{AnalysisConfig, CoincidenceHistogram, G2Fit, PairRate, SourceMetrics};
use fwm_core::ensemble::DataPoint;
use fwm_core::lineshape::ModelRates;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

fn create(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(path.display(), e))
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::io(path.display(), e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let at = e
        .position()
        .map(|p| format!(" at byte offset {} (line {})", p.byte(), p.line()))
        .unwrap_or_default();
    CliError::Io(format!("{}{at}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path.display(), e))?;
    serde_json::to_writer_pretty(f, value).map_err(|e| CliError::io(path.display(), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| CliError::io(path.display(), e))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| CliError::io(path.display(), e))
}

/// Model sweep table: `<axis>,r_single,r_pairs,eta`.
pub fn write_sweep(path: &Path, axis: &str, rows: &[(f64, ModelRates)]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| csv_err(path, e);
    w.write_record([axis, "r_single", "r_pairs", "eta"])
        .map_err(io)?;
    for (x, r) in rows {
        w.write_record([
            x.to_string(),
            r.single.to_string(),
            r.pairs.to_string(),
            r.eta.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

pub fn read_sweep(path: &Path) -> Result<(String, Vec<(f64, ModelRates)>)> {
    let mut r = open(path)?;
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| CliError::Io(format!("{}: missing header", path.display())))?
        .map_err(|e| csv_err(path, e))?;
    let axis = header.get(0).unwrap_or("").to_string();
    let mut rows = vec![];
    for rec in records {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let v = numbers(path, &rec, 4)?;
        rows.push((
            v[0],
            ModelRates {
                single: v[1],
                pairs: v[2],
                eta: v[3],
            },
        ));
    }
    Ok((axis, rows))
}

fn numbers(path: &Path, rec: &csv::StringRecord, n: usize) -> Result<Vec<f64>> {
    let at = || {
        rec.position()
            .map(|p| format!("byte offset {}", p.byte()))
            .unwrap_or_default()
    };
    if rec.len() != n {
        return Err(CliError::Io(format!(
            "{}: {}: expected {n} fields, got {}",
            path.display(),
            at(),
            rec.len()
        )));
    }
    rec.iter()
        .map(|f| {
            f.parse::<f64>().map_err(|e| {
                CliError::Io(format!(
                    "{}: {}: bad number `{f}`: {e}",
                    path.display(),
                    at()
                ))
            })
        })
        .collect()
}

/// `x,y[,sigma]` rows; a first line that does not parse as numbers is a header.
pub fn read_xy(path: &Path) -> Result<Vec<DataPoint>> {
    let mut r = open(path)?;
    let mut out = vec![];
    let mut width = None;
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if k == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let n = *width.get_or_insert(rec.len());
        if !(n == 2 || n == 3) {
            return Err(CliError::Io(format!(
                "{}: expected 2 or 3 columns, got {n}",
                path.display()
            )));
        }
        let v = numbers(path, &rec, n)?;
        out.push(DataPoint {
            x: v[0],
            y: v[1],
            sigma: v.get(2).copied(),
        });
    }
    Ok(out)
}

pub fn write_xy(path: &Path, header: [&str; 2], data: &[DataPoint]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| csv_err(path, e);
    let weighted = data.iter().any(|d| d.sigma.is_some());
    if weighted {
        w.write_record([header[0], header[1], "sigma"])
            .map_err(io)?;
    } else {
        w.write_record(header).map_err(io)?;
    }
    for d in data {
        let mut rec = vec![d.x.to_string(), d.y.to_string()];
        if let Some(s) = d.sigma {
            rec.push(s.to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_start_ns: f64,
    pub bin_end_ns: f64,
    pub count: u64,
}

pub fn histogram_rows(h: &CoincidenceHistogram) -> Vec<HistogramRow> {
    (0..h.counts.len())
        .map(|k| HistogramRow {
            bin_start_ns: h.bin_start(k) * 1e9,
            bin_end_ns: h.bin_start(k + 1) * 1e9,
            count: h.counts[k],
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path.display(), e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCurveRow {
    pub dt_ns: f64,
    pub model: f64,
}

/// Histogram layout as recorded in the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub bin_width_ns: f64,
    pub lo_ns: f64,
    pub hi_ns: f64,
    pub n_bins: usize,
    pub total_counts: u64,
    pub n_start_events: u64,
    pub active_time_s: f64,
}

impl From<&CoincidenceHistogram> for HistogramSummary {
    fn from(h: &CoincidenceHistogram) -> Self {
        Self {
            bin_width_ns: h.bin_width() * 1e9,
            lo_ns: h.lo() * 1e9,
            hi_ns: h.hi() * 1e9,
            n_bins: h.counts.len(),
            total_counts: h.total(),
            n_start_events: h.n_start_events,
            active_time_s: h.active_time,
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub metrics: SourceMetrics,
    pub fit: G2Fit,
    pub pair_rate: PairRate,
    pub histogram: HistogramSummary,
    pub config: AnalysisConfig,
}

/// One evaluated cell of an optimization grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeRow {
    pub rank: usize,
    pub small_delta: f64,
    pub p780_mw: f64,
    pub p776_mw: f64,
    pub od: f64,
    pub r_single: f64,
    pub r_pairs: f64,
    pub eta: f64,
    pub tau_ns: f64,
    pub brightness: f64,
    pub objective: f64,
}
