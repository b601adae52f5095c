//! Per-cell capacity traces: CSV ingestion, normalization and pre-knee truncation.
//!
//! The canonical on-disk format is long-form CSV with one row per
//! measurement (`cell_id,time,capacity`), capacity in ampere-hours.
//! Column names are configurable.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest cell count a sub-sampling study can run on.
pub const MIN_STUDY_CELLS: usize = 6;

/// Reference capacity used to express a trace in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the cell's own first measurement.
    InitialCapacity,
    /// Divide by the dataset's nominal capacity.
    NominalCapacity,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "initial" | "initial_capacity" => Ok(Normalization::InitialCapacity),
            "nominal" | "nominal_capacity" => Ok(Normalization::NominalCapacity),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub cell_id: String,
    pub time: f64,
    pub capacity: f64,
}

/// A single cell's capacity measurements, re-based to start at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityTrace {
    pub cell_id: String,
    pub times: Vec<f64>,
    /// Raw capacities in ampere-hours, when known.
    pub capacities_ah: Vec<f64>,
    /// Capacities in percent of the reference; empty until normalized.
    pub capacities_pct: Vec<f64>,
    pub normalization: Option<Normalization>,
}

impl CapacityTrace {
    /// Build a raw (un-normalized) trace. Times must be strictly increasing
    /// and are re-based so the first measurement sits at zero.
    pub fn from_raw(cell_id: impl Into<String>, times: Vec<f64>, capacities_ah: Vec<f64>) -> Result<Self> {
        let cell_id = cell_id.into();
        check_series(&cell_id, &times, &capacities_ah)?;
        if let Some(c) = capacities_ah.iter().find(|c| **c <= 0.0) {
            return Err(Error::InvalidTrace {
                cell: cell_id,
                reason: format!("non-positive capacity {c}"),
            });
        }
        let t0 = times[0];
        Ok(CapacityTrace {
            cell_id,
            times: times.iter().map(|t| t - t0).collect(),
            capacities_ah,
            capacities_pct: Vec::new(),
            normalization: None,
        })
    }

    /// Build an already-normalized trace directly from percent values. The
    /// raw capacities are left empty, so such a trace cannot be re-normalized.
    pub fn from_percent(
        cell_id: impl Into<String>,
        times: Vec<f64>,
        capacities_pct: Vec<f64>,
        normalization: Normalization,
    ) -> Result<Self> {
        let cell_id = cell_id.into();
        check_series(&cell_id, &times, &capacities_pct)?;
        let t0 = times[0];
        Ok(CapacityTrace {
            cell_id,
            times: times.iter().map(|t| t - t0).collect(),
            capacities_ah: Vec::new(),
            capacities_pct,
            normalization: Some(normalization),
        })
    }

    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("traces are non-empty")
    }

    fn retain_first(&self, n: usize) -> CapacityTrace {
        CapacityTrace {
            cell_id: self.cell_id.clone(),
            times: self.times[..n].to_vec(),
            capacities_ah: self.capacities_ah.get(..n).map(<[f64]>::to_vec).unwrap_or_default(),
            capacities_pct: self.capacities_pct.get(..n).map(<[f64]>::to_vec).unwrap_or_default(),
            normalization: self.normalization,
        }
    }
}

fn check_series(cell: &str, times: &[f64], values: &[f64]) -> Result<()> {
    let bad = |reason: String| Error::InvalidTrace {
        cell: cell.to_string(),
        reason,
    };
    if times.is_empty() {
        return Err(bad("no measurements".into()));
    }
    if times.len() != values.len() {
        return Err(bad(format!(
            "{} times but {} capacities",
            times.len(),
            values.len()
        )));
    }
    if times.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("times are not strictly increasing".into()));
    }
    Ok(())
}

/// A collection of traces from nominally identical cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub traces: Vec<CapacityTrace>,
    /// Nominal cell capacity in ampere-hours.
    pub nominal_capacity: Option<f64>,
    pub time_unit: String,
}

impl Dataset {
    /// Number of cells.
    pub fn k(&self) -> usize {
        self.traces.len()
    }

    pub fn cell_ids(&self) -> Vec<String> {
        self.traces.iter().map(|t| t.cell_id.clone()).collect()
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.traces.first().and_then(|t| t.normalization)
    }

    pub fn trace(&self, cell_id: &str) -> Option<&CapacityTrace> {
        self.traces.iter().find(|t| t.cell_id == cell_id)
    }

    /// SHA-256 over the dataset's numeric content, hex encoded. Used to key
    /// the first-level posterior cache.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.traces {
            h.update((t.cell_id.len() as u64).to_le_bytes());
            h.update(t.cell_id.as_bytes());
            h.update([t.normalization.map_or(0u8, |n| n as u8 + 1)]);
            for series in [&t.times, &t.capacities_ah, &t.capacities_pct] {
                h.update((series.len() as u64).to_le_bytes());
                for v in series.iter() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Write the raw capacities as long-form CSV (`cell_id,time,capacity`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record(["cell_id", "time", "capacity"]).map_err(ser)?;
        for t in &self.traces {
            if t.capacities_ah.len() != t.times.len() {
                return Err(Error::Serialization(format!(
                    "cell `{}` has no raw capacities to write",
                    t.cell_id
                )));
            }
            for (time, cap) in t.times.iter().zip(&t.capacities_ah) {
                w.write_record([t.cell_id.as_str(), &time.to_string(), &cap.to_string()])
                    .map_err(ser)?;
            }
        }
        w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Column mapping and metadata for [`ingest_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub name: String,
    pub cell_column: String,
    pub time_column: String,
    pub capacity_column: String,
    /// Free-form label, e.g. `hours` or `efc`.
    pub time_unit: String,
    pub nominal_capacity: Option<f64>,
    /// Cells with fewer points are rejected. Defaults to the LinExp
    /// parameter count plus two.
    pub min_points: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            name: "dataset".into(),
            cell_column: "cell_id".into(),
            time_column: "time".into(),
            capacity_column: "capacity".into(),
            time_unit: "efc".into(),
            nominal_capacity: None,
            min_points: 5,
        }
    }
}

impl IngestConfig {
    /// Parse a flat `key = value` file. Unset keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }
}

/// Read a long-form CSV file into a [`Dataset`] of raw traces.
pub fn ingest_csv(path: impl AsRef<Path>, config: &IngestConfig) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, config)
}

/// As [`ingest_csv`], from any reader.
pub fn ingest_reader<R: Read>(reader: R, config: &IngestConfig) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::MalformedRows {
            lines: vec![1],
            detail: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cell_idx = column(&config.cell_column)?;
    let time_idx = column(&config.time_column)?;
    let cap_idx = column(&config.capacity_column)?;

    let mut bad_lines = Vec::new();
    let mut first_problem = None;
    let mut records = Vec::new();
    for result in rdr.records() {
        let rec = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                bad_lines.push(line);
                first_problem.get_or_insert_with(|| e.to_string());
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        match parse_record(&rec, cell_idx, time_idx, cap_idx) {
            Ok(r) => records.push(r),
            Err(msg) => {
                bad_lines.push(line);
                first_problem.get_or_insert(format!("line {line}: {msg}"));
            }
        }
    }
    if !bad_lines.is_empty() {
        return Err(Error::MalformedRows {
            lines: bad_lines,
            detail: first_problem.unwrap_or_default(),
        });
    }
    assemble(records, config)
}

fn parse_record(
    rec: &csv::StringRecord,
    cell_idx: usize,
    time_idx: usize,
    cap_idx: usize,
) -> std::result::Result<RawRecord, String> {
    let field = |i: usize, what: &str| rec.get(i).ok_or_else(|| format!("missing {what} field"));
    let cell_id = field(cell_idx, "cell")?;
    if cell_id.is_empty() {
        return Err("empty cell id".into());
    }
    let time: f64 = field(time_idx, "time")?
        .parse()
        .map_err(|_| format!("time `{}` is not a number", rec.get(time_idx).unwrap_or("")))?;
    let capacity: f64 = field(cap_idx, "capacity")?
        .parse()
        .map_err(|_| format!("capacity `{}` is not a number", rec.get(cap_idx).unwrap_or("")))?;
    if !time.is_finite() || time < 0.0 {
        return Err(format!("time {time} must be finite and non-negative"));
    }
    if !capacity.is_finite() || capacity <= 0.0 {
        return Err(format!("capacity {capacity} must be finite and positive"));
    }
    Ok(RawRecord {
        cell_id: cell_id.to_string(),
        time,
        capacity,
    })
}

/// Group records by cell (in order of first appearance), sort by time and
/// resolve duplicate timestamps by keeping the last row.
fn assemble(records: Vec<RawRecord>, config: &IngestConfig) -> Result<Dataset> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for r in records {
        let entry = groups.entry(r.cell_id.clone()).or_insert_with(|| {
            order.push(r.cell_id.clone());
            Vec::new()
        });
        entry.push((r.time, r.capacity));
    }

    let mut traces = Vec::with_capacity(order.len());
    let mut rejected = 0;
    for id in order {
        let mut rows = groups.remove(&id).expect("grouped above");
        // stable sort keeps file order among equal times, so the last
        // duplicate is the last element of each run
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(rows.len());
        for row in rows {
            match dedup.last_mut() {
                Some(last) if last.0 == row.0 => *last = row,
                _ => dedup.push(row),
            }
        }
        if dedup.len() < config.min_points {
            warn!(
                "cell `{id}` rejected: {} points, at least {} required",
                dedup.len(),
                config.min_points
            );
            rejected += 1;
            continue;
        }
        let (times, caps) = dedup.into_iter().unzip();
        traces.push(CapacityTrace::from_raw(id, times, caps)?);
    }
    if rejected > 0 && traces.len() < MIN_STUDY_CELLS {
        return Err(Error::TooFewCells {
            found: traces.len(),
            required: MIN_STUDY_CELLS,
        });
    }
    Ok(Dataset {
        name: config.name.clone(),
        traces,
        nominal_capacity: config.nominal_capacity,
        time_unit: config.time_unit.clone(),
    })
}

/// Express every trace in percent of the chosen reference capacity.
/// Always recomputed from the raw capacities, so it is idempotent.
pub fn normalize(dataset: &Dataset, mode: Normalization) -> Result<Dataset> {
    let nominal = match mode {
        Normalization::NominalCapacity => match dataset.nominal_capacity {
            Some(c) if c > 0.0 && c.is_finite() => Some(c),
            Some(c) => {
                return Err(Error::Normalization(format!(
                    "nominal capacity {c} must be positive"
                )))
            }
            None => {
                return Err(Error::Normalization(
                    "nominal capacity is required for nominal normalization".into(),
                ))
            }
        },
        Normalization::InitialCapacity => None,
    };
    let mut out = dataset.clone();
    for trace in &mut out.traces {
        if trace.capacities_ah.len() != trace.times.len() {
            return Err(Error::Normalization(format!(
                "cell `{}` has no raw capacities",
                trace.cell_id
            )));
        }
        let reference = match nominal {
            Some(c) => c,
            None => trace.capacities_ah[0],
        };
        if reference <= 0.0 {
            return Err(Error::Normalization(format!(
                "cell `{}` has non-positive reference capacity {reference}",
                trace.cell_id
            )));
        }
        trace.capacities_pct = trace
            .capacities_ah
            .iter()
            .map(|c| c / reference * 100.0)
            .collect();
        if nominal.is_none() {
            trace.capacities_pct[0] = 100.0;
        }
        trace.normalization = Some(mode);
    }
    Ok(out)
}

/// Fitted knee location of one cell: exponential onset `t_f` and time constant `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeParams {
    pub t_f: f64,
    pub tau: f64,
}

impl KneeParams {
    /// Measurements at or before this time are kept. At the cutoff the
    /// exponential term equals `exp(-2)` percent of capacity.
    pub fn cutoff(&self) -> f64 {
        self.t_f - 2.0 * self.tau
    }
}

/// Result of [`truncate_pre_knee`].
#[derive(Debug, Clone)]
pub struct Truncation {
    pub dataset: Dataset,
    pub dropped: Vec<String>,
}

/// Keep, per cell, the measurements with `t <= t_f - 2 tau`. Cells left
/// with fewer than `min_points` points (or nothing beyond the first
/// measurement) are dropped with a warning.
pub fn truncate_pre_knee(
    dataset: &Dataset,
    knees: &HashMap<String, KneeParams>,
    min_points: usize,
) -> Result<Truncation> {
    let mut traces = Vec::with_capacity(dataset.k());
    let mut dropped = Vec::new();
    for trace in &dataset.traces {
        let knee = knees.get(&trace.cell_id).ok_or_else(|| {
            Error::InvalidTrace {
                cell: trace.cell_id.clone(),
                reason: "no knee parameters supplied".into(),
            }
        })?;
        let cutoff = knee.cutoff();
        let keep = trace.times.iter().take_while(|t| **t <= cutoff).count();
        if keep < 2 || keep < min_points {
            warn!(
                "cell `{}` dropped: {keep} points before cutoff {cutoff}",
                trace.cell_id
            );
            dropped.push(trace.cell_id.clone());
            continue;
        }
        traces.push(trace.retain_first(keep));
    }
    if traces.is_empty() {
        return Err(Error::InsufficientData(
            "pre-knee truncation dropped every cell".into(),
        ));
    }
    Ok(Truncation {
        dataset: Dataset {
            traces,
            ..dataset.clone()
        },
        dropped,
    })
}
