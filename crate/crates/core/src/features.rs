//! Sliding-window segmentation and the window feature table.
//!
//! Each window is summarised by the driving features used throughout the
//! crate: relative speed range, time-to-collision riskiness, modes of the
//! weather/road categorical signals and an aggregated lane-keeping quality.
//! Continuous features are standardized and categoricals one-hot encoded;
//! the unstandardized values travel alongside every row for rule-based
//! labeling.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{csv_io, Frame, SignalKind, SignalSchema, SignalSpec, TimeSeriesMeasurement};
use crate::seed::stream_rng;

/// Tolerance, in seconds, for window boundary comparisons.
pub const TIME_EPS: f64 = 1e-6;

/// Lateral distance (m) beyond which a detected vehicle carries no collision risk.
pub const LATERAL_RISK_LIMIT_M: f64 = 2.2;

pub const RELATIVE_SPEED_RANGE: &str = "relative_speed_range";
pub const TTC_RISKINESS: &str = "ttc_riskiness";
pub const LANE_KEEPING_QUALITY: &str = "lane_keeping_quality";
pub const UNSAFE_LABEL: &str = "Unsafe";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid window spec: {0}")]
    InvalidWindowSpec(String),
    #[error("measurement `{id}` spans {span:.3} s, shorter than the {window} s window")]
    MeasurementTooShort { id: String, span: f64, window: f64 },
    #[error("signal `{0}` has no value in the window")]
    MissingSignal(String),
    #[error("time-to-collision must be positive, got {0}")]
    DomainError(f64),
    #[error("signal `{signal}` is not usable: {reason}")]
    SignalBinding { signal: String, reason: String },
    #[error("feature `{feature}` has unknown category `{category}`")]
    UnknownCategory { feature: String, category: String },
    #[error("no window survived feature extraction")]
    EmptyResult,
    #[error("sample fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("feature table is malformed: {0}")]
    Format(String),
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_seconds: f64,
    pub step_seconds: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { window_seconds: 6.0, step_seconds: 3.0 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.window_seconds) || !ok(self.step_seconds) {
            return Err(FeatureError::InvalidWindowSpec("durations must be positive".into()));
        }
        if self.step_seconds > self.window_seconds {
            return Err(FeatureError::InvalidWindowSpec(format!(
                "step {} s exceeds window {} s",
                self.step_seconds, self.window_seconds
            )));
        }
        Ok(())
    }

    /// Number of windows emitted for a measurement spanning `span` seconds.
    pub fn window_count(&self, span: f64) -> usize {
        if span + TIME_EPS < self.window_seconds {
            0
        } else {
            ((span - self.window_seconds + TIME_EPS) / self.step_seconds).floor() as usize + 1
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub measurement: &'a TimeSeriesMeasurement,
    pub start_time: f64,
    pub end_time: f64,
    pub frames: &'a [Frame],
}

impl Window<'_> {
    pub fn window_ref(&self) -> WindowRef {
        WindowRef { measurement_id: self.measurement.id.clone(), start_time: self.start_time }
    }

    fn signal_index(&self, name: &str) -> Result<usize, FeatureError> {
        self.measurement.schema.index_of(name).ok_or_else(|| FeatureError::SignalBinding {
            signal: name.to_string(),
            reason: "not in the measurement schema".into(),
        })
    }
}

/// Identifies a window by its measurement and start time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRef {
    pub measurement_id: String,
    pub start_time: f64,
}

impl WindowRef {
    /// Lexicographic on measurement id, then numeric on start time.
    pub fn cmp_key(&self, other: &Self) -> Ordering {
        self.measurement_id
            .cmp(&other.measurement_id)
            .then(self.start_time.total_cmp(&other.start_time))
    }
}

impl fmt::Display for WindowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.measurement_id, self.start_time)
    }
}

/// Cut a measurement into windows starting every `step_seconds`. Only windows
/// fully inside the measurement span are emitted; windows holding fewer than
/// two frames (gaps in the recording) are skipped.
pub fn segment<'a>(
    measurement: &'a TimeSeriesMeasurement,
    spec: &WindowSpec,
) -> Result<Vec<Window<'a>>, FeatureError> {
    spec.validate()?;
    let span = measurement.span_seconds();
    let count = spec.window_count(span);
    if count == 0 {
        return Err(FeatureError::MeasurementTooShort {
            id: measurement.id.clone(),
            span,
            window: spec.window_seconds,
        });
    }
    let t0 = measurement.start_time();
    let frames = &measurement.frames;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start_time = t0 + k as f64 * spec.step_seconds;
        let end_time = start_time + spec.window_seconds;
        let lo = frames.partition_point(|f| f.timestamp < start_time - TIME_EPS);
        let hi = frames.partition_point(|f| f.timestamp < end_time - TIME_EPS);
        if hi - lo < 2 {
            log::debug!("{}: window at {start_time} s has {} frame(s), skipped", measurement.id, hi - lo);
            continue;
        }
        out.push(Window { measurement, start_time, end_time, frames: &frames[lo..hi] });
    }
    Ok(out)
}

/// `(max - min) / max` of absolute speed over the window's present values.
/// A window that never moves yields 0.
pub fn relative_speed_range(window: &Window<'_>, speed_signal: &str) -> Result<f64, FeatureError> {
    let idx = window.signal_index(speed_signal)?;
    let (mut lo, mut hi, mut any) = (f64::INFINITY, f64::NEG_INFINITY, false);
    for v in window.frames.iter().filter_map(|f| f.values[idx].and_then(|v| v.as_f64())) {
        let v = v.abs();
        lo = lo.min(v);
        hi = hi.max(v);
        any = true;
    }
    if !any {
        return Err(FeatureError::MissingSignal(speed_signal.to_string()));
    }
    Ok(if hi == 0.0 { 0.0 } else { (hi - lo) / hi })
}

/// Most frequent category of a categorical signal; ties go to the category
/// listed first in the schema.
pub fn mode_feature<'a>(window: &Window<'a>, signal: &str) -> Result<&'a str, FeatureError> {
    let idx = window.signal_index(signal)?;
    let spec = &window.measurement.schema.signals[idx];
    let mut counts = vec![0usize; spec.category_list().len()];
    for c in window.frames.iter().filter_map(|f| f.values[idx].and_then(|v| v.as_category())) {
        counts[c] += 1;
    }
    let (best, n) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (i, &n)| if n > acc.1 { (i, n) } else { acc });
    if n == 0 {
        return Err(FeatureError::MissingSignal(signal.to_string()));
    }
    Ok(window.measurement.schema.signals[idx].category_list()[best].as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneKeeping {
    Good,
    Bad,
    Worst,
}

impl LaneKeeping {
    pub const LABELS: [&'static str; 3] = ["Good", "Bad", "Worst"];

    pub fn label(self) -> &'static str {
        Self::LABELS[self as usize]
    }
}

/// Aggregate three lane-boundary safety signals. A boundary counts as unsafe
/// when it is unsafe in any frame of the window; two unsafe boundaries map to
/// `Bad`.
pub fn lane_keeping_quality(window: &Window<'_>, boundaries: &[String; 3]) -> Result<LaneKeeping, FeatureError> {
    let mut unsafe_count = 0;
    for name in boundaries {
        let idx = window.signal_index(name)?;
        let spec = &window.measurement.schema.signals[idx];
        let unsafe_idx = spec.category_list().iter().position(|c| c == UNSAFE_LABEL).ok_or_else(|| {
            FeatureError::SignalBinding { signal: name.clone(), reason: format!("no `{UNSAFE_LABEL}` category") }
        })?;
        let mut present = false;
        let mut is_unsafe = false;
        for c in window.frames.iter().filter_map(|f| f.values[idx].and_then(|v| v.as_category())) {
            present = true;
            is_unsafe |= c == unsafe_idx;
        }
        if !present {
            return Err(FeatureError::MissingSignal(name.clone()));
        }
        unsafe_count += usize::from(is_unsafe);
    }
    Ok(match unsafe_count {
        0 => LaneKeeping::Good,
        3 => LaneKeeping::Worst,
        _ => LaneKeeping::Bad,
    })
}

/// `(1 / ttc) * max(0, (2.2 - |lateral|) / 2.2)`, unclamped.
pub fn ttc_riskiness(ttc: f64, lateral_position: f64) -> Result<f64, FeatureError> {
    if !(ttc > 0.0) {
        return Err(FeatureError::DomainError(ttc));
    }
    Ok((1.0 / ttc) * ((LATERAL_RISK_LIMIT_M - lateral_position.abs()) / LATERAL_RISK_LIMIT_M).max(0.0))
}

/// Worst-case riskiness over every frame and detected-vehicle slot, clamped to
/// `[0, 1]`. Zero when no vehicle was detected.
pub fn window_ttc_riskiness(window: &Window<'_>, objects: &[ObjectSignals]) -> Result<f64, FeatureError> {
    let mut worst = 0.0f64;
    for obj in objects {
        let ti = window.signal_index(&obj.ttc)?;
        let li = window.signal_index(&obj.lateral_position)?;
        for f in window.frames {
            if let (Some(t), Some(l)) = (f.values[ti].and_then(|v| v.as_f64()), f.values[li].and_then(|v| v.as_f64())) {
                worst = worst.max(ttc_riskiness(t, l)?);
            }
        }
    }
    Ok(worst.clamp(0.0, 1.0))
}

/// Time-to-collision and lateral offset signals of one detected-vehicle slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSignals {
    pub ttc: String,
    pub lateral_position: String,
}

/// Names of the telemetry signals the feature extractor reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrivingSignals {
    pub speed: String,
    /// Categorical signals summarised by their mode, in output order.
    pub mode_signals: Vec<String>,
    pub lane_boundaries: [String; 3],
    pub objects: Vec<ObjectSignals>,
}

impl Default for DrivingSignals {
    fn default() -> Self {
        Self {
            speed: "speed".into(),
            mode_signals: vec![
                "rain_severe".into(),
                "sunray_severe".into(),
                "blur_severe".into(),
                "road_condition".into(),
            ],
            lane_boundaries: ["lane_left_safety".into(), "lane_middle_safety".into(), "lane_right_safety".into()],
            objects: vec![ObjectSignals { ttc: "ttc".into(), lateral_position: "lateral_position".into() }],
        }
    }
}

impl DrivingSignals {
    /// The telemetry schema these default signal names assume.
    pub fn schema(&self) -> SignalSchema {
        let severity = ["Severe", "Normal"];
        let mut signals = vec![SignalSpec::continuous(&self.speed, "km/h")];
        for name in &self.mode_signals {
            let spec = if name == "road_condition" {
                SignalSpec::categorical(name, &["Dry", "Wet", "Snow-covered"])
            } else {
                SignalSpec::categorical(name, &severity)
            };
            signals.push(spec);
        }
        for b in &self.lane_boundaries {
            signals.push(SignalSpec::categorical(b, &["Safe", UNSAFE_LABEL]));
        }
        for o in &self.objects {
            signals.push(SignalSpec::continuous(&o.ttc, "s"));
            signals.push(SignalSpec::continuous(&o.lateral_position, "m"));
        }
        SignalSchema { signals }
    }

    /// Check that every named signal exists with the expected kind.
    pub fn check(&self, schema: &SignalSchema) -> Result<(), FeatureError> {
        let want = |name: &str, kind: SignalKind| -> Result<(), FeatureError> {
            match schema.signal(name) {
                None => Err(FeatureError::SignalBinding { signal: name.into(), reason: "not in schema".into() }),
                Some(s) if s.kind != kind => Err(FeatureError::SignalBinding {
                    signal: name.into(),
                    reason: format!("expected a {kind:?} signal"),
                }),
                Some(_) => Ok(()),
            }
        };
        want(&self.speed, SignalKind::Continuous)?;
        for m in &self.mode_signals {
            want(m, SignalKind::Categorical)?;
        }
        for b in &self.lane_boundaries {
            want(b, SignalKind::Categorical)?;
            if !schema.signal(b).is_some_and(|s| s.category_list().iter().any(|c| c == UNSAFE_LABEL)) {
                return Err(FeatureError::SignalBinding {
                    signal: b.clone(),
                    reason: format!("no `{UNSAFE_LABEL}` category"),
                });
            }
        }
        for o in &self.objects {
            want(&o.ttc, SignalKind::Continuous)?;
            want(&o.lateral_position, SignalKind::Continuous)?;
        }
        Ok(())
    }

    fn categorical_features(&self, schema: &SignalSchema) -> Vec<CategoricalFeature> {
        let mut out: Vec<_> = self
            .mode_signals
            .iter()
            .map(|m| CategoricalFeature {
                name: m.clone(),
                categories: schema.signal(m).map(|s| s.category_list().to_vec()).unwrap_or_default(),
            })
            .collect();
        out.push(CategoricalFeature {
            name: LANE_KEEPING_QUALITY.into(),
            categories: LaneKeeping::LABELS.iter().map(|s| s.to_string()).collect(),
        });
        out
    }
}

/// Unstandardized feature values of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub window_ref: WindowRef,
    pub end_time: f64,
    /// Ordered as [`FeatureSchema::raw_continuous`].
    pub continuous: Vec<f64>,
    /// Ordered as [`FeatureSchema::categorical_features`].
    pub categorical: Vec<String>,
}

/// Compute every window feature. Continuous order: relative speed range, ttc riskiness.
pub fn extract_window_features(window: &Window<'_>, signals: &DrivingSignals) -> Result<RawFeatures, FeatureError> {
    let rsr = relative_speed_range(window, &signals.speed)?;
    let risk = window_ttc_riskiness(window, &signals.objects)?;
    let mut categorical = Vec::with_capacity(signals.mode_signals.len() + 1);
    for m in &signals.mode_signals {
        categorical.push(mode_feature(window, m)?.to_string());
    }
    categorical.push(lane_keeping_quality(window, &signals.lane_boundaries)?.label().to_string());
    Ok(RawFeatures {
        window_ref: window.window_ref(),
        end_time: window.end_time,
        continuous: vec![rsr, risk],
        categorical,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFeature {
    pub name: String,
    pub mean: f64,
    pub stddev: f64,
}

impl ContinuousFeature {
    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / self.stddev
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.stddev + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub categories: Vec<String>,
}

/// Fitted layout of the feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    /// Every computed continuous feature, standardized or not.
    pub raw_continuous: Vec<String>,
    /// Standardized continuous features (zero-variance ones are dropped).
    pub continuous_features: Vec<ContinuousFeature>,
    pub categorical_features: Vec<CategoricalFeature>,
}

impl FeatureSchema {
    pub fn width(&self) -> usize {
        self.continuous_features.len() + self.categorical_features.iter().map(|c| c.categories.len()).sum::<usize>()
    }

    /// Column names, one-hot columns as `feature=category`.
    pub fn column_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.continuous_features.iter().map(|c| c.name.clone()).collect();
        for cat in &self.categorical_features {
            out.extend(cat.categories.iter().map(|c| format!("{}={}", cat.name, c)));
        }
        out
    }

    pub fn raw_continuous_index(&self, name: &str) -> Option<usize> {
        self.raw_continuous.iter().position(|n| n == name)
    }

    pub fn categorical_index(&self, name: &str) -> Option<usize> {
        self.categorical_features.iter().position(|c| c.name == name)
    }

    pub fn load_json(path: &Path) -> Result<Self, FeatureError> {
        let f = File::open(path).map_err(|e| not_found(e, path))?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| FeatureError::Format(e.to_string()))
    }

    pub fn save_json(&self, path: &Path) -> Result<(), FeatureError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    #[default]
    Strict,
    /// Unknown categories encode as an all-zero block.
    Permissive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub window_ref: WindowRef,
    pub values: Vec<f64>,
}

/// Apply a fitted schema to one window's raw features.
pub fn transform(schema: &FeatureSchema, raw: &RawFeatures, mode: TransformMode) -> Result<FeatureVector, FeatureError> {
    let mut values = Vec::with_capacity(schema.width());
    for feat in &schema.continuous_features {
        let i = schema
            .raw_continuous_index(&feat.name)
            .filter(|&i| i < raw.continuous.len())
            .ok_or_else(|| FeatureError::Format(format!("raw value for `{}` missing", feat.name)))?;
        values.push(feat.standardize(raw.continuous[i]));
    }
    if raw.categorical.len() != schema.categorical_features.len() {
        return Err(FeatureError::Format("categorical value count does not match the schema".into()));
    }
    for (feat, value) in schema.categorical_features.iter().zip(&raw.categorical) {
        let hit = feat.categories.iter().position(|c| c == value);
        if hit.is_none() {
            match mode {
                TransformMode::Strict => {
                    return Err(FeatureError::UnknownCategory { feature: feat.name.clone(), category: value.clone() })
                }
                TransformMode::Permissive => {
                    log::warn!("{}: unknown category `{value}` for `{}`, encoded as zeros", raw.window_ref, feat.name)
                }
            }
        }
        values.extend((0..feat.categories.len()).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }));
    }
    Ok(FeatureVector { window_ref: raw.window_ref.clone(), values })
}

/// The window feature table: standardized rows plus their raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub schema: FeatureSchema,
    pub rows: Vec<FeatureVector>,
    /// Aligned with `rows`.
    pub raw: Vec<RawFeatures>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_array(&self) -> Array2<f64> {
        let w = self.schema.width();
        let mut a = Array2::zeros((self.rows.len(), w));
        for (mut dst, row) in a.outer_iter_mut().zip(&self.rows) {
            dst.iter_mut().zip(&row.values).for_each(|(d, s)| *d = *s);
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureOptions {
    pub window: WindowSpec,
    pub signals: DrivingSignals,
    pub sample_seed: u64,
    pub sample_fraction: f64,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self { window: WindowSpec::default(), signals: DrivingSignals::default(), sample_seed: 0, sample_fraction: 1.0 }
    }
}

/// Segment all measurements, extract window features, randomly sample
/// windows, fit standardization on the sample and encode the table.
pub fn build_feature_matrix(
    measurements: &[TimeSeriesMeasurement],
    options: &FeatureOptions,
) -> Result<FeatureMatrix, FeatureError> {
    options.window.validate()?;
    let fraction = options.sample_fraction;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FeatureError::InvalidFraction(fraction));
    }
    let per_measurement: Vec<Result<Vec<RawFeatures>, FeatureError>> = measurements
        .par_iter()
        .map(|m| {
            options.signals.check(&m.schema)?;
            let windows = match segment(m, &options.window) {
                Ok(w) => w,
                Err(e @ FeatureError::MeasurementTooShort { .. }) => {
                    log::warn!("{e}; skipped");
                    return Ok(Vec::new());
                }
                Err(e) => return Err(e),
            };
            let mut out = Vec::with_capacity(windows.len());
            let mut dropped = 0usize;
            for w in &windows {
                match extract_window_features(w, &options.signals) {
                    Ok(f) => out.push(f),
                    Err(FeatureError::MissingSignal(s)) => {
                        log::debug!("{}: window dropped, `{s}` missing", w.window_ref());
                        dropped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if dropped > 0 {
                log::warn!("{}: {dropped} window(s) dropped for missing signals", m.id);
            }
            Ok(out)
        })
        .collect();
    let mut raw = Vec::new();
    for r in per_measurement {
        raw.extend(r?);
    }

    let mut rng = stream_rng(options.sample_seed, "window-sample", 0);
    raw.shuffle(&mut rng);
    let keep = ((raw.len() as f64) * fraction).ceil() as usize;
    raw.truncate(keep.min(raw.len()));
    if raw.is_empty() {
        return Err(FeatureError::EmptyResult);
    }

    let schema_source = &measurements
        .iter()
        .find(|m| m.id == raw[0].window_ref.measurement_id)
        .expect("window comes from a measurement")
        .schema;
    let raw_continuous = vec![RELATIVE_SPEED_RANGE.to_string(), TTC_RISKINESS.to_string()];
    let continuous_features = fit_standardization(&raw_continuous, &raw);
    let schema = FeatureSchema {
        raw_continuous,
        continuous_features,
        categorical_features: options.signals.categorical_features(schema_source),
    };
    let rows = raw
        .iter()
        .map(|r| transform(&schema, r, TransformMode::Strict))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureMatrix { schema, rows, raw })
}

/// Mean and population standard deviation per column; zero-variance columns
/// are dropped.
fn fit_standardization(names: &[String], raw: &[RawFeatures]) -> Vec<ContinuousFeature> {
    let n = raw.len() as f64;
    let mut out = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let mean = raw.iter().map(|r| r.continuous[i]).sum::<f64>() / n;
        let var = raw.iter().map(|r| (r.continuous[i] - mean).powi(2)).sum::<f64>() / n;
        let stddev = var.sqrt();
        if stddev > 1e-12 * mean.abs().max(1.0) {
            out.push(ContinuousFeature { name: name.clone(), mean, stddev });
        } else {
            log::warn!("feature `{name}` is constant over the sample; dropped from the table");
        }
    }
    out
}

/// File locations of a persisted feature table.
#[derive(Debug, Clone)]
pub struct FeatureFiles {
    pub features: PathBuf,
    pub raw: PathBuf,
    pub schema: PathBuf,
}

impl FeatureFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            features: dir.join("features.csv"),
            raw: dir.join("features_raw.csv"),
            schema: dir.join("feature_schema.json"),
        }
    }
}

fn not_found(e: std::io::Error, path: &Path) -> FeatureError {
    if e.kind() == std::io::ErrorKind::NotFound {
        FeatureError::FileNotFound(path.to_path_buf())
    } else {
        FeatureError::Io(e)
    }
}

pub fn write_feature_matrix(matrix: &FeatureMatrix, files: &FeatureFiles) -> Result<(), FeatureError> {
    matrix.schema.save_json(&files.schema)?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&files.features)?));
    let mut header = vec!["measurement_id".to_string(), "window_start".to_string()];
    header.extend(matrix.schema.column_names());
    w.write_record(&header).map_err(csv_io)?;
    for row in &matrix.rows {
        let mut rec = vec![row.window_ref.measurement_id.clone(), format!("{}", row.window_ref.start_time)];
        rec.extend(row.values.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&files.raw)?));
    let mut header = vec!["measurement_id".to_string(), "window_start".to_string(), "window_end".to_string()];
    header.extend(matrix.schema.raw_continuous.iter().cloned());
    header.extend(matrix.schema.categorical_features.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(csv_io)?;
    for r in &matrix.raw {
        let mut rec = vec![
            r.window_ref.measurement_id.clone(),
            format!("{}", r.window_ref.start_time),
            format!("{}", r.end_time),
        ];
        rec.extend(r.continuous.iter().map(|v| format!("{v}")));
        rec.extend(r.categorical.iter().cloned());
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64, FeatureError> {
    s.trim().parse().map_err(|_| FeatureError::Format(format!("`{s}` is not a number ({what})")))
}

fn open_csv(path: &Path) -> Result<csv::Reader<BufReader<File>>, FeatureError> {
    let f = File::open(path).map_err(|e| not_found(e, path))?;
    Ok(csv::Reader::from_reader(BufReader::new(f)))
}

pub fn read_feature_matrix(files: &FeatureFiles) -> Result<FeatureMatrix, FeatureError> {
    let schema = FeatureSchema::load_json(&files.schema)?;
    let fmt_err = |e: csv::Error| FeatureError::Format(e.to_string());

    let mut rdr = open_csv(&files.features)?;
    let mut expected = vec!["measurement_id".to_string(), "window_start".to_string()];
    expected.extend(schema.column_names());
    if rdr.headers().map_err(fmt_err)?.iter().ne(expected.iter().map(String::as_str)) {
        return Err(FeatureError::Format(format!("{} header does not match the schema", files.features.display())));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(fmt_err)?;
        let window_ref = WindowRef { measurement_id: rec[0].to_string(), start_time: parse_f64(&rec[1], "window_start")? };
        let values = rec.iter().skip(2).map(|v| parse_f64(v, "feature")).collect::<Result<Vec<_>, _>>()?;
        if values.len() != schema.width() {
            return Err(FeatureError::Format("feature row width does not match the schema".into()));
        }
        rows.push(FeatureVector { window_ref, values });
    }

    let mut rdr = open_csv(&files.raw)?;
    let n_cont = schema.raw_continuous.len();
    let n_cat = schema.categorical_features.len();
    let mut raw = Vec::with_capacity(rows.len());
    for rec in rdr.records() {
        let rec = rec.map_err(fmt_err)?;
        if rec.len() != 3 + n_cont + n_cat {
            return Err(FeatureError::Format("raw feature row width does not match the schema".into()));
        }
        raw.push(RawFeatures {
            window_ref: WindowRef { measurement_id: rec[0].to_string(), start_time: parse_f64(&rec[1], "window_start")? },
            end_time: parse_f64(&rec[2], "window_end")?,
            continuous: (0..n_cont).map(|i| parse_f64(&rec[3 + i], "raw feature")).collect::<Result<_, _>>()?,
            categorical: (0..n_cat).map(|i| rec[3 + n_cont + i].to_string()).collect(),
        });
    }
    if raw.len() != rows.len() || raw.iter().zip(&rows).any(|(r, v)| r.window_ref != v.window_ref) {
        return Err(FeatureError::Format("raw and standardized tables are not aligned".into()));
    }
    Ok(FeatureMatrix { schema, rows, raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Frame, SignalValue};
    use proptest::prelude::*;
    use std::sync::Arc;

    /// Build a measurement from `(t, speed)` samples with fixed categorical values.
    fn measurement(id: &str, samples: &[(f64, f64)]) -> TimeSeriesMeasurement {
        let schema = Arc::new(DrivingSignals::default().schema());
        let frames = samples
            .iter()
            .map(|&(t, v)| {
                let mut values = vec![Some(SignalValue::Category(1)); schema.len()];
                values[0] = Some(SignalValue::Continuous(v));
                // road Dry, lanes Safe, no vehicle
                values[4] = Some(SignalValue::Category(0));
                for i in 5..8 {
                    values[i] = Some(SignalValue::Category(0));
                }
                values[8] = None;
                values[9] = None;
                Frame { timestamp: t, values }
            })
            .collect();
        TimeSeriesMeasurement::new(id, schema, frames, 10.0).unwrap()
    }

    fn regular(id: &str, seconds: f64, speed: impl Fn(f64) -> f64) -> TimeSeriesMeasurement {
        let n = (seconds * 10.0).round() as usize;
        let samples: Vec<_> = (0..n).map(|i| i as f64 / 10.0).map(|t| (t, speed(t))).collect();
        measurement(id, &samples)
    }

    #[test]
    fn sixty_seconds_gives_nineteen_windows() {
        let m = regular("m", 60.0, |_| 50.0);
        let w = segment(&m, &WindowSpec::default()).unwrap();
        // oracle: enumerate k with 3k + 6 <= 60
        let expected: Vec<f64> = (0..).map(|k| 3.0 * k as f64).take_while(|s| s + 6.0 <= 60.0).collect();
        assert_eq!(expected.len(), 19);
        assert_eq!(w.iter().map(|w| w.start_time).collect::<Vec<_>>(), expected);
        assert!(w.iter().all(|w| w.frames.len() == 60));
    }

    #[test]
    fn boundary_and_short_measurements() {
        assert_eq!(segment(&regular("m", 6.0, |_| 1.0), &WindowSpec::default()).unwrap().len(), 1);
        assert!(matches!(
            segment(&regular("m", 5.0, |_| 1.0), &WindowSpec::default()),
            Err(FeatureError::MeasurementTooShort { .. })
        ));
    }

    #[test]
    fn window_spec_rejects_gaps() {
        let spec = WindowSpec { window_seconds: 3.0, step_seconds: 4.0 };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn relative_speed_range_examples() {
        let spec = WindowSpec::default();
        let brake = regular("a", 6.0, |t| 200.0 - 20.0 * t / 5.9);
        let w = &segment(&brake, &spec).unwrap()[0];
        assert!((relative_speed_range(w, "speed").unwrap() - 0.1).abs() < 1e-12);

        let slow = regular("b", 6.0, |t| 30.0 - 20.0 * t / 5.9);
        let w = &segment(&slow, &spec).unwrap()[0];
        assert!((relative_speed_range(w, "speed").unwrap() - 2.0 / 3.0).abs() < 1e-9);

        let cruise = regular("c", 6.0, |_| 50.0);
        assert_eq!(relative_speed_range(&segment(&cruise, &spec).unwrap()[0], "speed").unwrap(), 0.0);

        let parked = regular("d", 6.0, |_| 0.0);
        assert_eq!(relative_speed_range(&segment(&parked, &spec).unwrap()[0], "speed").unwrap(), 0.0);

        let reverse = regular("e", 6.0, |t| -10.0 - t);
        let r = relative_speed_range(&segment(&reverse, &spec).unwrap()[0], "speed").unwrap();
        assert!((0.0..=1.0).contains(&r) && r > 0.0);
    }

    fn window_with_categories(rain: &[Option<u16>]) -> TimeSeriesMeasurement {
        let mut m = regular("m", 6.0, |_| 50.0);
        let n = m.frames.len();
        for (i, f) in m.frames.iter_mut().enumerate() {
            f.values[1] = rain[i * rain.len() / n].map(SignalValue::Category);
        }
        m
    }

    #[test]
    fn mode_feature_majority_ties_and_missing() {
        let spec = WindowSpec::default();
        // schema order for rain_severe is (Severe, Normal)
        let m = window_with_categories(&[Some(1), Some(1), Some(0)]);
        assert_eq!(mode_feature(&segment(&m, &spec).unwrap()[0], "rain_severe").unwrap(), "Normal");

        // exhaustive two-value tie cases: whichever comes first in time, Severe wins
        for pattern in [[Some(0), Some(1)], [Some(1), Some(0)]] {
            let m = window_with_categories(&pattern);
            assert_eq!(mode_feature(&segment(&m, &spec).unwrap()[0], "rain_severe").unwrap(), "Severe");
        }

        let m = window_with_categories(&[None]);
        assert!(matches!(
            mode_feature(&segment(&m, &spec).unwrap()[0], "rain_severe"),
            Err(FeatureError::MissingSignal(_))
        ));
    }

    #[test]
    fn lane_keeping_levels() {
        let spec = WindowSpec::default();
        let bounds = DrivingSignals::default().lane_boundaries;
        for (unsafe_lanes, want) in [
            (vec![], LaneKeeping::Good),
            (vec![5], LaneKeeping::Bad),
            (vec![5, 7], LaneKeeping::Bad),
            (vec![5, 6, 7], LaneKeeping::Worst),
        ] {
            let mut m = regular("m", 6.0, |_| 50.0);
            // a single unsafe frame marks the boundary unsafe for the window
            for &i in &unsafe_lanes {
                m.frames[17].values[i] = Some(SignalValue::Category(1));
            }
            let w = &segment(&m, &spec).unwrap()[0];
            assert_eq!(lane_keeping_quality(w, &bounds).unwrap(), want);
        }
        let mut m = regular("m", 6.0, |_| 50.0);
        m.frames.iter_mut().for_each(|f| f.values[6] = None);
        let w = &segment(&m, &spec).unwrap()[0];
        assert!(matches!(lane_keeping_quality(w, &bounds), Err(FeatureError::MissingSignal(_))));
    }

    #[test]
    fn ttc_riskiness_examples() {
        assert_eq!(ttc_riskiness(2.0, 0.0).unwrap(), 0.5);
        assert_eq!(ttc_riskiness(1.0, 2.2).unwrap(), 0.0);
        // (1/4) * ((2.2 - 1.1) / 2.2) = 0.25 * 0.5
        assert!((ttc_riskiness(4.0, 1.1).unwrap() - 0.125).abs() < 1e-15);
        assert!((ttc_riskiness(4.0, -1.1).unwrap() - 0.125).abs() < 1e-15);
        assert!(matches!(ttc_riskiness(0.0, 0.0), Err(FeatureError::DomainError(_))));
        assert!(matches!(ttc_riskiness(-1.0, 0.0), Err(FeatureError::DomainError(_))));
    }

    #[test]
    fn window_riskiness_is_clamped_max() {
        let spec = WindowSpec::default();
        let mut m = regular("m", 6.0, |_| 50.0);
        assert_eq!(window_ttc_riskiness(&segment(&m, &spec).unwrap()[0], &DrivingSignals::default().objects).unwrap(), 0.0);
        m.frames[3].values[8] = Some(SignalValue::Continuous(4.0));
        m.frames[3].values[9] = Some(SignalValue::Continuous(1.1));
        m.frames[9].values[8] = Some(SignalValue::Continuous(2.0));
        m.frames[9].values[9] = Some(SignalValue::Continuous(0.0));
        let objs = DrivingSignals::default().objects;
        assert_eq!(window_ttc_riskiness(&segment(&m, &spec).unwrap()[0], &objs).unwrap(), 0.5);
        m.frames[12].values[8] = Some(SignalValue::Continuous(0.3));
        m.frames[12].values[9] = Some(SignalValue::Continuous(0.0));
        assert_eq!(window_ttc_riskiness(&segment(&m, &spec).unwrap()[0], &objs).unwrap(), 1.0);
    }

    #[test]
    fn transform_examples() {
        let schema = FeatureSchema {
            raw_continuous: vec!["x".into()],
            continuous_features: vec![ContinuousFeature { name: "x".into(), mean: 3.0, stddev: 2.0 }],
            categorical_features: vec![CategoricalFeature {
                name: "road_condition".into(),
                categories: vec!["Dry".into(), "Wet".into(), "Snow-covered".into()],
            }],
        };
        let raw = |x: f64, road: &str| RawFeatures {
            window_ref: WindowRef { measurement_id: "m".into(), start_time: 0.0 },
            end_time: 6.0,
            continuous: vec![x],
            categorical: vec![road.into()],
        };
        assert_eq!(transform(&schema, &raw(3.0, "Dry"), TransformMode::Strict).unwrap().values, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(transform(&schema, &raw(5.0, "Wet"), TransformMode::Strict).unwrap().values, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            transform(&schema, &raw(3.0, "Snow-covered"), TransformMode::Strict).unwrap().values[1..],
            [0.0, 0.0, 1.0]
        );
        assert!(matches!(
            transform(&schema, &raw(3.0, "Ice"), TransformMode::Strict),
            Err(FeatureError::UnknownCategory { .. })
        ));
        assert_eq!(transform(&schema, &raw(3.0, "Ice"), TransformMode::Permissive).unwrap().values, vec![0.0; 4]);
    }

    fn varied(id: &str, seconds: f64, phase: f64) -> TimeSeriesMeasurement {
        regular(id, seconds, |t| 60.0 + 25.0 * (t * 0.37 + phase).sin() + 10.0 * (t * 1.9).cos())
    }

    #[test]
    fn feature_matrix_contract() {
        let ms = vec![varied("a", 60.0, 0.0)];
        let opts = FeatureOptions::default();
        let fm = build_feature_matrix(&ms, &opts).unwrap();
        assert_eq!(fm.len(), 19);
        // ttc riskiness is constant (no vehicles) and dropped
        assert_eq!(fm.schema.continuous_features.len(), 1);
        assert_eq!(fm.schema.width(), 1 + 2 + 2 + 2 + 3 + 3);
        let a = fm.to_array();
        let col = a.column(0);
        let mean = col.sum() / col.len() as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
        for row in &fm.rows {
            let mut off = fm.schema.continuous_features.len();
            for cat in &fm.schema.categorical_features {
                let s: f64 = row.values[off..off + cat.categories.len()].iter().sum();
                assert_eq!(s, 1.0);
                off += cat.categories.len();
            }
        }
        let again = build_feature_matrix(&ms, &opts).unwrap();
        assert_eq!(fm, again);
    }

    #[test]
    fn sampling_fraction_and_errors() {
        let ms = vec![varied("a", 60.0, 0.0), varied("b", 90.0, 1.0), regular("short", 4.0, |_| 1.0)];
        let half = FeatureOptions { sample_fraction: 0.5, sample_seed: 9, ..Default::default() };
        let fm = build_feature_matrix(&ms, &half).unwrap();
        assert_eq!(fm.len(), (19 + 29) / 2);
        let other = build_feature_matrix(&ms, &FeatureOptions { sample_seed: 10, ..half.clone() }).unwrap();
        assert_ne!(
            fm.rows.iter().map(|r| r.window_ref.clone()).collect::<Vec<_>>(),
            other.rows.iter().map(|r| r.window_ref.clone()).collect::<Vec<_>>()
        );
        assert!(matches!(
            build_feature_matrix(&[regular("s", 3.0, |_| 1.0)], &FeatureOptions::default()),
            Err(FeatureError::EmptyResult)
        ));
        assert!(matches!(
            build_feature_matrix(&ms, &FeatureOptions { sample_fraction: 0.0, ..Default::default() }),
            Err(FeatureError::InvalidFraction(_))
        ));
    }

    #[test]
    fn missing_speed_window_is_dropped() {
        let mut m = varied("a", 60.0, 0.0);
        for f in &mut m.frames[..60] {
            f.values[0] = None;
        }
        let fm = build_feature_matrix(&[m], &FeatureOptions::default()).unwrap();
        // only the window at 0 s loses every speed value
        assert_eq!(fm.len(), 18);
    }

    #[test]
    fn persisted_matrix_round_trips() {
        let ms = vec![varied("a", 60.0, 0.0), varied("b", 30.0, 2.0)];
        let fm = build_feature_matrix(&ms, &FeatureOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = FeatureFiles::in_dir(dir.path());
        write_feature_matrix(&fm, &files).unwrap();
        assert_eq!(read_feature_matrix(&files).unwrap(), fm);
        std::fs::remove_file(&files.raw).unwrap();
        assert!(matches!(read_feature_matrix(&files), Err(FeatureError::FileNotFound(_))));
    }

    proptest! {
        #[test]
        fn segment_count_matches_closed_form(frames in 1usize..900, w in 0.5f64..20.0, ratio in 0.05f64..1.0) {
            let step = w * ratio;
            let m = regular("p", frames as f64 / 10.0, |_| 1.0);
            let span = m.span_seconds();
            let spec = WindowSpec { window_seconds: w, step_seconds: step };
            let expected = if span + TIME_EPS < w { 0 } else { ((span - w + TIME_EPS) / step).floor() as usize + 1 };
            match segment(&m, &spec) {
                Ok(ws) => prop_assert_eq!(ws.len(), expected),
                Err(FeatureError::MeasurementTooShort { .. }) => prop_assert_eq!(expected, 0),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn relative_speed_range_in_unit_interval(speeds in proptest::collection::vec(0.0f64..250.0, 60)) {
            let samples: Vec<_> = speeds.iter().enumerate().map(|(i, &v)| (i as f64 / 10.0, v)).collect();
            let m = measurement("p", &samples);
            let w = &segment(&m, &WindowSpec::default()).unwrap()[0];
            let r = relative_speed_range(w, "speed").unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn riskiness_monotone(t1 in 0.05f64..20.0, t2 in 0.05f64..20.0, l1 in -5.0f64..5.0, l2 in -5.0f64..5.0) {
            let (ta, tb) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(ttc_riskiness(ta, l1).unwrap() >= ttc_riskiness(tb, l1).unwrap());
            let (la, lb) = if l1.abs() <= l2.abs() { (l1, l2) } else { (l2, l1) };
            prop_assert!(ttc_riskiness(t1, la).unwrap() >= ttc_riskiness(t1, lb).unwrap());
        }

        #[test]
        fn standardization_inverts(mean in -100.0f64..100.0, sd in 0.01f64..50.0, x in -1e3f64..1e3) {
            let f = ContinuousFeature { name: "x".into(), mean, stddev: sd };
            prop_assert!((f.destandardize(f.standardize(x)) - x).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}
