//! Telemetry ingestion: signal schemas, frames and measurements, plus the CSV
//! and JSON-lines loaders/writers.
//!
//! Values are stored densely per frame, aligned with the schema's signal
//! order. Categorical values are held as an index into the signal's category
//! list. Missing values survive ingestion untouched; the feature pipeline
//! decides what to do with them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column name reserved for the frame timestamp in CSV files.
pub const TIMESTAMP_COLUMN: &str = "timestamp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub name: String,
    pub kind: SignalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default)]
    pub unit: String,
}

impl SignalSpec {
    pub fn continuous(name: &str, unit: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: SignalKind::Continuous,
            categories: None,
            unit: unit.to_string(),
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: SignalKind::Categorical,
            categories: Some(categories.iter().map(|c| c.to_string()).collect()),
            unit: String::new(),
        }
    }

    /// Category labels, empty for continuous signals.
    pub fn category_list(&self) -> &[String] {
        self.categories.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaViolation {
    DuplicateName(String),
    EmptyName,
    ReservedName(String),
    EmptyCategories(String),
    DuplicateCategory { signal: String, category: String },
    CategoriesOnContinuous(String),
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateName(n) => write!(f, "duplicate signal name `{n}`"),
            Self::EmptyName => write!(f, "signal with empty name"),
            Self::ReservedName(n) => write!(f, "signal name `{n}` is reserved"),
            Self::EmptyCategories(n) => write!(f, "categorical signal `{n}` has no categories"),
            Self::DuplicateCategory { signal, category } => {
                write!(f, "signal `{signal}` lists category `{category}` twice")
            }
            Self::CategoriesOnContinuous(n) => {
                write!(f, "continuous signal `{n}` must not list categories")
            }
        }
    }
}

/// Ordered list of signals recorded in a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSchema {
    pub signals: Vec<SignalSpec>,
}

impl SignalSchema {
    /// Build and validate a schema.
    pub fn new(signals: Vec<SignalSpec>) -> Result<Self, IngestError> {
        let schema = Self { signals };
        let violations = validate_schema(&schema);
        if violations.is_empty() {
            Ok(schema)
        } else {
            Err(IngestError::InvalidSchema(violations))
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.signals.iter().position(|s| s.name == name)
    }

    pub fn signal(&self, name: &str) -> Option<&SignalSpec> {
        self.signals.iter().find(|s| s.name == name)
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn load_json(path: &Path) -> Result<Self, IngestError> {
        let file = open(path)?;
        let schema: SignalSchema = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| IngestError::Format { row: None, reason: e.to_string() })?;
        let violations = validate_schema(&schema);
        if violations.is_empty() {
            Ok(schema)
        } else {
            Err(IngestError::InvalidSchema(violations))
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<(), IngestError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Report every uniqueness and category problem in `schema`. Empty means valid.
pub fn validate_schema(schema: &SignalSchema) -> Vec<SchemaViolation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut reported = HashSet::new();
    for s in &schema.signals {
        if s.name.is_empty() {
            out.push(SchemaViolation::EmptyName);
        } else if s.name == TIMESTAMP_COLUMN {
            out.push(SchemaViolation::ReservedName(s.name.clone()));
        } else if !seen.insert(s.name.as_str()) && reported.insert(s.name.as_str()) {
            out.push(SchemaViolation::DuplicateName(s.name.clone()));
        }
        match (s.kind, &s.categories) {
            (SignalKind::Categorical, None) => out.push(SchemaViolation::EmptyCategories(s.name.clone())),
            (SignalKind::Categorical, Some(c)) if c.is_empty() => {
                out.push(SchemaViolation::EmptyCategories(s.name.clone()))
            }
            (SignalKind::Categorical, Some(c)) => {
                let mut cats = HashSet::new();
                for cat in c {
                    if !cats.insert(cat.as_str()) {
                        out.push(SchemaViolation::DuplicateCategory {
                            signal: s.name.clone(),
                            category: cat.clone(),
                        });
                    }
                }
            }
            (SignalKind::Continuous, Some(c)) if !c.is_empty() => {
                out.push(SchemaViolation::CategoriesOnContinuous(s.name.clone()))
            }
            (SignalKind::Continuous, _) => {}
        }
    }
    out
}

/// A single present signal value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalValue {
    Continuous(f64),
    /// Index into the signal's category list.
    Category(u16),
}

impl SignalValue {
    pub fn as_f64(self) -> Option<f64> {
        match self {
            Self::Continuous(v) => Some(v),
            Self::Category(_) => None,
        }
    }

    pub fn as_category(self) -> Option<usize> {
        match self {
            Self::Category(c) => Some(c as usize),
            Self::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    /// One slot per schema signal; `None` is a missing value.
    pub values: Vec<Option<SignalValue>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesMeasurement {
    pub id: String,
    pub schema: Arc<SignalSchema>,
    pub frames: Vec<Frame>,
    pub nominal_rate_hz: f64,
}

impl TimeSeriesMeasurement {
    /// Validate frames against the schema and timestamp ordering.
    pub fn new(
        id: impl Into<String>,
        schema: Arc<SignalSchema>,
        frames: Vec<Frame>,
        nominal_rate_hz: f64,
    ) -> Result<Self, IngestError> {
        if !(nominal_rate_hz.is_finite() && nominal_rate_hz > 0.0) {
            return Err(IngestError::InvalidRate(nominal_rate_hz));
        }
        let mut prev = f64::NEG_INFINITY;
        for (row, frame) in frames.iter().enumerate() {
            check_frame(&schema, frame, row)?;
            if frame.timestamp.partial_cmp(&prev) != Some(std::cmp::Ordering::Greater) {
                return Err(IngestError::NonMonotoneTimestamp { row });
            }
            prev = frame.timestamp;
        }
        Ok(Self { id: id.into(), schema, frames, nominal_rate_hz })
    }

    /// Covered duration: first timestamp to one nominal frame period past the last.
    pub fn span_seconds(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp + 1.0 / self.nominal_rate_hz,
            _ => 0.0,
        }
    }

    pub fn start_time(&self) -> f64 {
        self.frames.first().map_or(0.0, |f| f.timestamp)
    }
}

fn check_frame(schema: &SignalSchema, frame: &Frame, row: usize) -> Result<(), IngestError> {
    if !frame.timestamp.is_finite() {
        return Err(IngestError::SchemaViolation {
            row,
            signal: TIMESTAMP_COLUMN.into(),
            reason: "timestamp is not finite".into(),
        });
    }
    if frame.values.len() != schema.len() {
        return Err(IngestError::SchemaViolation {
            row,
            signal: String::new(),
            reason: format!("frame has {} values, schema has {}", frame.values.len(), schema.len()),
        });
    }
    for (spec, value) in schema.signals.iter().zip(&frame.values) {
        let bad = |reason: String| IngestError::SchemaViolation {
            row,
            signal: spec.name.clone(),
            reason,
        };
        match (spec.kind, value) {
            (_, None) => {}
            (SignalKind::Continuous, Some(SignalValue::Continuous(v))) if !v.is_finite() => {
                return Err(bad(format!("non-finite value {v}")))
            }
            (SignalKind::Continuous, Some(SignalValue::Continuous(_))) => {}
            (SignalKind::Categorical, Some(SignalValue::Category(c)))
                if (*c as usize) < spec.category_list().len() => {}
            (SignalKind::Categorical, Some(SignalValue::Category(c))) => {
                return Err(bad(format!("category index {c} out of range")))
            }
            (kind, Some(v)) => return Err(bad(format!("value {v:?} does not fit a {kind:?} signal"))),
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("invalid schema: {}", join_violations(.0))]
    InvalidSchema(Vec<SchemaViolation>),
    #[error("row {row}, signal `{signal}`: {reason}")]
    SchemaViolation { row: usize, signal: String, reason: String },
    #[error("row {row}: timestamp not strictly greater than the previous row")]
    NonMonotoneTimestamp { row: usize },
    #[error("malformed input{}: {reason}", .row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Format { row: Option<usize>, reason: String },
    #[error("unsupported measurement file extension: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("nominal rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_violations(v: &[SchemaViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl IngestError {
    /// Whether this error describes a single offending data row.
    fn row_level(&self) -> bool {
        matches!(
            self,
            Self::SchemaViolation { .. } | Self::NonMonotoneTimestamp { .. } | Self::Format { row: Some(_), .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    /// The first offending row aborts the load.
    #[default]
    Strict,
    /// Offending rows are reported and skipped; valid rows are kept.
    Permissive,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub mode: LoadMode,
    pub nominal_rate_hz: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { mode: LoadMode::Strict, nominal_rate_hz: 10.0 }
    }
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub measurement: TimeSeriesMeasurement,
    /// Rejected rows (permissive mode only).
    pub violations: Vec<IngestError>,
    /// Data rows seen in the file.
    pub rows_read: usize,
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IngestError::FileNotFound(path.to_path_buf()),
        _ => IngestError::Io(e),
    })
}

/// Load a measurement file (`.csv`, `.jsonl` or `.ndjson`). The measurement id
/// is the file stem. Row indices in errors are 0-based data rows.
pub fn load_measurement(
    path: &Path,
    schema: Arc<SignalSchema>,
    options: LoadOptions,
) -> Result<LoadOutcome, IngestError> {
    let violations = validate_schema(&schema);
    if !violations.is_empty() {
        return Err(IngestError::InvalidSchema(violations));
    }
    if !(options.nominal_rate_hz.is_finite() && options.nominal_rate_hz > 0.0) {
        return Err(IngestError::InvalidRate(options.nominal_rate_hz));
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let file = open(path)?;
    let reader = BufReader::new(file);
    let rows: Box<dyn Iterator<Item = Result<Frame, IngestError>>> = match ext.as_str() {
        "csv" => Box::new(csv_frames(reader, &schema)?),
        "jsonl" | "ndjson" => Box::new(jsonl_frames(reader, &schema)),
        _ => return Err(IngestError::UnsupportedFormat(path.to_path_buf())),
    };

    let mut frames = Vec::new();
    let mut rejected = Vec::new();
    let mut rows_read = 0usize;
    let mut prev = f64::NEG_INFINITY;
    for (row, parsed) in rows.enumerate() {
        rows_read += 1;
        let checked = parsed.and_then(|frame| {
            if frame.timestamp > prev {
                Ok(frame)
            } else {
                Err(IngestError::NonMonotoneTimestamp { row })
            }
        });
        match checked {
            Ok(frame) => {
                prev = frame.timestamp;
                frames.push(frame);
            }
            Err(e) if options.mode == LoadMode::Permissive && e.row_level() => {
                log::warn!("{}: skipping {e}", path.display());
                rejected.push(e);
            }
            Err(e) => return Err(e),
        }
    }
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("measurement").to_string();
    let measurement = TimeSeriesMeasurement { id, schema, frames, nominal_rate_hz: options.nominal_rate_hz };
    Ok(LoadOutcome { measurement, violations: rejected, rows_read })
}

fn parse_cell(spec: &SignalSpec, raw: &str, row: usize) -> Result<Option<SignalValue>, IngestError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let violation = |reason: String| IngestError::SchemaViolation { row, signal: spec.name.clone(), reason };
    match spec.kind {
        SignalKind::Continuous => {
            let v: f64 = raw.parse().map_err(|_| violation(format!("`{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(violation(format!("non-finite value `{raw}`")));
            }
            Ok(Some(SignalValue::Continuous(v)))
        }
        SignalKind::Categorical => category_index(spec, raw)
            .map(|i| Some(SignalValue::Category(i)))
            .ok_or_else(|| violation(format!("`{raw}` is not one of {:?}", spec.category_list()))),
    }
}

fn category_index(spec: &SignalSpec, label: &str) -> Option<u16> {
    spec.category_list().iter().position(|c| c == label).map(|i| i as u16)
}

fn csv_frames<'a, R: std::io::Read + 'a>(
    reader: R,
    schema: &'a SignalSchema,
) -> Result<impl Iterator<Item = Result<Frame, IngestError>> + 'a, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Format { row: None, reason: e.to_string() })?
        .clone();
    if headers.get(0).map(str::trim) != Some(TIMESTAMP_COLUMN) {
        return Err(IngestError::Format {
            row: None,
            reason: format!("first column must be `{TIMESTAMP_COLUMN}`"),
        });
    }
    let mut columns = Vec::with_capacity(headers.len() - 1);
    let mut seen = HashSet::new();
    for name in headers.iter().skip(1) {
        let name = name.trim();
        let idx = schema.index_of(name).ok_or_else(|| IngestError::Format {
            row: None,
            reason: format!("column `{name}` is not in the schema"),
        })?;
        if !seen.insert(idx) {
            return Err(IngestError::Format { row: None, reason: format!("column `{name}` repeated") });
        }
        columns.push(idx);
    }
    let width = headers.len();
    Ok(rdr.into_records().enumerate().map(move |(row, rec)| {
        let rec = rec.map_err(|e| IngestError::Format { row: Some(row), reason: e.to_string() })?;
        if rec.len() != width {
            return Err(IngestError::Format {
                row: Some(row),
                reason: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let ts_raw = rec.get(0).unwrap_or("").trim();
        let timestamp: f64 = ts_raw.parse().ok().filter(|t: &f64| t.is_finite()).ok_or_else(|| {
            IngestError::SchemaViolation {
                row,
                signal: TIMESTAMP_COLUMN.into(),
                reason: format!("invalid timestamp `{ts_raw}`"),
            }
        })?;
        let mut values = vec![None; schema.len()];
        for (cell, &idx) in rec.iter().skip(1).zip(&columns) {
            values[idx] = parse_cell(&schema.signals[idx], cell, row)?;
        }
        Ok(Frame { timestamp, values })
    }))
}

#[derive(Deserialize)]
struct JsonFrame {
    t: f64,
    #[serde(default)]
    v: BTreeMap<String, serde_json::Value>,
}

fn jsonl_frames<'a, R: BufRead + 'a>(
    reader: R,
    schema: &'a SignalSchema,
) -> impl Iterator<Item = Result<Frame, IngestError>> + 'a {
    reader
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .enumerate()
        .map(move |(row, line)| {
            let line = line?;
            let jf: JsonFrame = serde_json::from_str(&line)
                .map_err(|e| IngestError::Format { row: Some(row), reason: e.to_string() })?;
            if !jf.t.is_finite() {
                return Err(IngestError::SchemaViolation {
                    row,
                    signal: TIMESTAMP_COLUMN.into(),
                    reason: "timestamp is not finite".into(),
                });
            }
            let mut values = vec![None; schema.len()];
            for (name, val) in jf.v {
                let idx = schema.index_of(&name).ok_or_else(|| IngestError::SchemaViolation {
                    row,
                    signal: name.clone(),
                    reason: "signal not in schema".into(),
                })?;
                let spec = &schema.signals[idx];
                let violation =
                    |reason: String| IngestError::SchemaViolation { row, signal: name.clone(), reason };
                values[idx] = match (spec.kind, val) {
                    (_, serde_json::Value::Null) => None,
                    (SignalKind::Continuous, serde_json::Value::Number(n)) => {
                        let v = n.as_f64().filter(|v| v.is_finite());
                        Some(SignalValue::Continuous(v.ok_or_else(|| violation("non-finite value".into()))?))
                    }
                    (SignalKind::Categorical, serde_json::Value::String(s)) => Some(SignalValue::Category(
                        category_index(spec, &s).ok_or_else(|| {
                            violation(format!("`{s}` is not one of {:?}", spec.category_list()))
                        })?,
                    )),
                    (kind, other) => return Err(violation(format!("{other} does not fit a {kind:?} signal"))),
                };
            }
            Ok(Frame { timestamp: jf.t, values })
        })
}

fn format_value(spec: &SignalSpec, value: Option<SignalValue>) -> String {
    match value {
        None => String::new(),
        Some(SignalValue::Continuous(v)) => format!("{v}"),
        Some(SignalValue::Category(c)) => spec.category_list()[c as usize].clone(),
    }
}

pub fn write_measurement_csv(m: &TimeSeriesMeasurement, path: &Path) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec![TIMESTAMP_COLUMN.to_string()];
    header.extend(m.schema.signals.iter().map(|s| s.name.clone()));
    w.write_record(&header).map_err(csv_io)?;
    let mut record = Vec::with_capacity(header.len());
    for frame in &m.frames {
        record.clear();
        record.push(format!("{}", frame.timestamp));
        for (spec, v) in m.schema.signals.iter().zip(&frame.values) {
            record.push(format_value(spec, *v));
        }
        w.write_record(&record).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_measurement_jsonl(m: &TimeSeriesMeasurement, path: &Path) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path)?);
    for frame in &m.frames {
        let mut v = serde_json::Map::new();
        for (spec, value) in m.schema.signals.iter().zip(&frame.values) {
            let json = match value {
                None => serde_json::Value::Null,
                Some(SignalValue::Continuous(x)) => serde_json::json!(x),
                Some(SignalValue::Category(c)) => serde_json::json!(spec.category_list()[*c as usize]),
            };
            v.insert(spec.name.clone(), json);
        }
        serde_json::to_writer(&mut w, &serde_json::json!({ "t": frame.timestamp, "v": v }))
            .map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Build a frame from name/value pairs, resolving category labels.
pub fn frame_from_pairs(
    schema: &SignalSchema,
    timestamp: f64,
    pairs: &[(&str, &str)],
) -> Result<Frame, IngestError> {
    let mut values = vec![None; schema.len()];
    let by_name: HashMap<_, _> = pairs.iter().copied().collect();
    for (idx, spec) in schema.signals.iter().enumerate() {
        if let Some(raw) = by_name.get(spec.name.as_str()) {
            values[idx] = parse_cell(spec, raw, 0)?;
        }
    }
    for (name, _) in pairs {
        if schema.index_of(name).is_none() {
            return Err(IngestError::SchemaViolation {
                row: 0,
                signal: name.to_string(),
                reason: "signal not in schema".into(),
            });
        }
    }
    Ok(Frame { timestamp, values })
}
