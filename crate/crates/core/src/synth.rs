//! Synthetic driving telemetry with planted anomalies, and 2-D point clouds
//! with hard anomalies.
//!
//! The driving generator is deliberately simple: speed follows a mean
//! reverting random walk toward a per-road-regime cruise speed, weather and
//! road conditions persist over minutes, lane boundaries are mostly safe and
//! a lead vehicle drifts in front of the ego car. Injections overwrite short
//! spans with one of five anomaly kinds, each matching a proxy-rule family.
//! Baseline signals and injection placement draw from separate random
//! streams, so the same seed with and without injections yields the same
//! baseline.

use std::f64::consts::PI;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DrivingSignals;
use crate::ingest::{csv_io, write_measurement_csv, write_measurement_jsonl, Frame, IngestError, SignalSchema, SignalValue, TimeSeriesMeasurement};
use crate::proxy::{FAMILY_COMBINATION, FAMILY_RISK, FAMILY_SPEED};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("injection file is malformed: {0}")]
    Format(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionKind {
    HardBrake,
    SevereWeatherMismatch,
    SensorBlur,
    LaneDeparture,
    NearCollision,
}

impl InjectionKind {
    pub const ALL: [InjectionKind; 5] = [
        Self::HardBrake,
        Self::SevereWeatherMismatch,
        Self::SensorBlur,
        Self::LaneDeparture,
        Self::NearCollision,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HardBrake => "hard-brake",
            Self::SevereWeatherMismatch => "severe-weather-mismatch",
            Self::SensorBlur => "sensor-blur",
            Self::LaneDeparture => "lane-departure",
            Self::NearCollision => "near-collision",
        }
    }

    /// Proxy-rule family expected to flag this kind.
    pub fn family(self) -> &'static str {
        match self {
            Self::HardBrake => FAMILY_SPEED,
            Self::SevereWeatherMismatch | Self::SensorBlur => FAMILY_COMBINATION,
            Self::LaneDeparture | Self::NearCollision => FAMILY_RISK,
        }
    }
}

impl fmt::Display for InjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SynthError::Format(format!("unknown injection kind `{s}`")))
    }
}

/// Probability that a given injection slot receives this kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub kind: InjectionKind,
    pub rate: f64,
}

/// Cruise speed and persistence of one road-condition regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub cruise_mean_kmh: f64,
    pub cruise_sd_kmh: f64,
    /// Mean regime duration beyond the one-minute minimum.
    pub mean_dwell_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_measurements: usize,
    pub duration_seconds: f64,
    pub rate_hz: f64,
    pub dry: RegimeConfig,
    pub wet: RegimeConfig,
    pub snow: RegimeConfig,
    /// Lane-boundary excursions per second of driving.
    pub lane_event_rate: f64,
    /// Length of the slots injections are placed in; one injection per slot at most.
    pub slot_seconds: f64,
    pub injections: Vec<InjectionSpec>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_measurements: 20,
            // 500 windows of 6 s every 3 s per measurement
            duration_seconds: 1503.0,
            rate_hz: 10.0,
            dry: RegimeConfig { cruise_mean_kmh: 100.0, cruise_sd_kmh: 15.0, mean_dwell_seconds: 360.0 },
            wet: RegimeConfig { cruise_mean_kmh: 80.0, cruise_sd_kmh: 10.0, mean_dwell_seconds: 240.0 },
            snow: RegimeConfig { cruise_mean_kmh: 50.0, cruise_sd_kmh: 8.0, mean_dwell_seconds: 120.0 },
            lane_event_rate: 1.0 / 150.0,
            slot_seconds: 60.0,
            injections: InjectionKind::ALL.iter().map(|&kind| InjectionSpec { kind, rate: 0.02 }).collect(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn without_injections(&self) -> Self {
        Self { injections: Vec::new(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.n_measurements == 0 {
            return bad("n_measurements must be at least 1".into());
        }
        if !positive(self.duration_seconds) {
            return bad(format!("duration_seconds must be positive, got {}", self.duration_seconds));
        }
        if !positive(self.rate_hz) {
            return bad(format!("rate_hz must be positive, got {}", self.rate_hz));
        }
        if !(self.slot_seconds.is_finite() && self.slot_seconds >= MIN_SLOT_SECONDS) {
            return bad(format!("slot_seconds must be at least {MIN_SLOT_SECONDS}, got {}", self.slot_seconds));
        }
        if !(self.lane_event_rate.is_finite() && self.lane_event_rate >= 0.0) {
            return bad(format!("lane_event_rate must be non-negative, got {}", self.lane_event_rate));
        }
        for (name, r) in [("dry", &self.dry), ("wet", &self.wet), ("snow", &self.snow)] {
            if !positive(r.cruise_mean_kmh) || !(r.cruise_sd_kmh >= 0.0) || !positive(r.mean_dwell_seconds) {
                return bad(format!("regime `{name}` needs positive cruise speed and dwell"));
            }
        }
        let mut total = 0.0;
        for spec in &self.injections {
            if !(0.0..=1.0).contains(&spec.rate) {
                return bad(format!("injection rate for `{}` must lie in [0, 1], got {}", spec.kind, spec.rate));
            }
            total += spec.rate;
        }
        if total > 1.0 + 1e-12 {
            return bad(format!("injection rates sum to {total}, more than 1"));
        }
        Ok(())
    }
}

const MIN_SLOT_SECONDS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub measurement_id: String,
    pub kind: InjectionKind,
    pub start_time: f64,
    pub end_time: f64,
}

impl InjectionRecord {
    pub fn overlaps(&self, start: f64, end: f64) -> bool {
        start < self.end_time && self.start_time < end
    }
}

pub fn measurement_id(index: usize) -> String {
    format!("drive_{index:03}")
}

// Signal indices in the default driving schema.
const SPEED: usize = 0;
const RAIN: usize = 1;
const SUNRAY: usize = 2;
const BLUR: usize = 3;
const ROAD: usize = 4;
const LANES: [usize; 3] = [5, 6, 7];
const TTC: usize = 8;
const LATERAL: usize = 9;

const SEVERE: u16 = 0;
const NORMAL: u16 = 1;
const DRY: u16 = 0;
const WET: u16 = 1;
const SNOW: u16 = 2;
const SAFE: u16 = 0;
const UNSAFE: u16 = 1;

/// No severe rain within this many seconds of a wet-regime boundary, so the
/// baseline never shows rain on a dry road.
const RAIN_MARGIN_S: f64 = 15.0;
const MIN_REGIME_S: f64 = 60.0;
const SPEED_REVERSION_PER_S: f64 = 0.05;
const SPEED_NOISE: f64 = 0.9;
const LEAD_GAP_M: f64 = 40.0;
const MIN_GAP_M: f64 = 8.0;

/// Per-frame signal tracks of one measurement before conversion to frames.
#[derive(Clone)]
struct Tracks {
    speed: Vec<f64>,
    rain: Vec<u16>,
    sunray: Vec<u16>,
    blur: Vec<u16>,
    road: Vec<u16>,
    lanes: [Vec<u16>; 3],
    ttc: Vec<Option<f64>>,
    lateral: Vec<Option<f64>>,
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    Exp::new(1.0 / mean).expect("positive mean").sample(rng)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn baseline(config: &ScenarioConfig, n: usize, rng: &mut ChaCha8Rng) -> Tracks {
    let dt = 1.0 / config.rate_hz;
    let mut t = Tracks {
        speed: vec![0.0; n],
        rain: vec![NORMAL; n],
        sunray: vec![NORMAL; n],
        blur: vec![NORMAL; n],
        road: vec![DRY; n],
        lanes: [vec![SAFE; n], vec![SAFE; n], vec![SAFE; n]],
        ttc: vec![None; n],
        lateral: vec![None; n],
    };

    // road regimes with per-regime cruise targets
    let mut target = vec![0.0; n];
    let mut regime = match rng.random::<f64>() {
        u if u < 0.6 => DRY,
        u if u < 0.9 => WET,
        _ => SNOW,
    };
    let mut i = 0;
    while i < n {
        let rc = match regime {
            DRY => &config.dry,
            WET => &config.wet,
            _ => &config.snow,
        };
        let len = ((MIN_REGIME_S + exp_sample(rng, rc.mean_dwell_seconds)) * config.rate_hz) as usize;
        let end = (i + len).min(n);
        let cruise = (rc.cruise_mean_kmh + rc.cruise_sd_kmh * gauss(rng)).max(20.0);
        for k in i..end {
            t.road[k] = regime;
            target[k] = cruise;
        }
        match regime {
            WET => episodes(rng, i, end, config.rate_hz, 60.0, 0.5, RAIN_MARGIN_S, |a, b, rng| {
                t.rain[a..b].fill(SEVERE);
                if rng.random::<f64>() < 0.3 {
                    let mid = (a + b) / 2;
                    let half = ((b - a) / 4).max(1);
                    t.blur[mid.saturating_sub(half)..(mid + half).min(b)].fill(SEVERE);
                }
            }),
            DRY => episodes(rng, i, end, config.rate_hz, 90.0, 0.35, 0.0, |a, b, _| t.sunray[a..b].fill(SEVERE)),
            _ => {}
        }
        let u = rng.random::<f64>();
        regime = match regime {
            DRY => if u < 0.8 { WET } else { SNOW },
            WET => if u < 0.7 { DRY } else { SNOW },
            _ => if u < 0.6 { WET } else { DRY },
        };
        i = end;
    }

    // speed: mean reverting walk toward the regime cruise speed
    let mut v = target[0] + 2.0 * gauss(rng);
    let noise = SPEED_NOISE * dt.sqrt();
    for k in 0..n {
        v += SPEED_REVERSION_PER_S * (target[k] - v) * dt + noise * gauss(rng);
        v = v.max(0.0);
        t.speed[k] = v;
    }

    // lane-boundary excursions, rarer on wet or snowy roads
    for k in 0..n {
        let rate = if t.road[k] == DRY { config.lane_event_rate } else { 0.5 * config.lane_event_rate };
        if rng.random::<f64>() < rate * dt {
            let side = match rng.random::<f64>() {
                u if u < 0.45 => 0,
                u if u < 0.9 => 2,
                _ => 1,
            };
            let len = ((0.5 + rng.random::<f64>()) * config.rate_hz) as usize;
            t.lanes[side][k..(k + len).min(n)].fill(UNSAFE);
        }
    }

    // lead vehicle: presence episodes, gap held near a following distance
    let mut k = 0;
    let mut present = rng.random::<f64>() < 0.6;
    while k < n {
        let mean = if present { 90.0 } else { 45.0 };
        let len = ((10.0 + exp_sample(rng, mean)) * config.rate_hz) as usize;
        let end = (k + len).min(n);
        if present {
            let mut gap = LEAD_GAP_M + 8.0 * gauss(rng);
            let mut closing = 0.0;
            let mut lateral = 0.3 * gauss(rng);
            for j in k..end {
                closing += 0.2 * (0.05 * (gap - LEAD_GAP_M) - closing) * dt + 0.6 * dt.sqrt() * gauss(rng);
                gap -= closing * dt;
                if gap < MIN_GAP_M {
                    gap = MIN_GAP_M;
                    closing = closing.min(0.0);
                }
                lateral += -0.1 * lateral * dt + 0.13 * dt.sqrt() * gauss(rng);
                t.lateral[j] = Some(lateral);
                t.ttc[j] = (closing > 0.1).then(|| gap / closing);
            }
        }
        present = !present;
        k = end;
    }
    t
}

/// Alternate normal/severe episodes inside `[start, end)`; severe episodes
/// cover roughly `share` of the time and stay `margin_s` away from the ends.
fn episodes<F: FnMut(usize, usize, &mut ChaCha8Rng)>(
    rng: &mut ChaCha8Rng,
    start: usize,
    end: usize,
    rate_hz: f64,
    mean_s: f64,
    share: f64,
    margin_s: f64,
    mut mark: F,
) {
    let margin = (margin_s * rate_hz) as usize;
    let (lo, hi) = (start + margin, end.saturating_sub(margin));
    let mut k = lo;
    let mut severe = false;
    while k < hi {
        let mean = if severe { mean_s * share } else { mean_s * (1.0 - share) };
        let len = ((10.0 + exp_sample(rng, mean)) * rate_hz) as usize;
        let e = (k + len).min(hi);
        if severe {
            mark(k, e, rng);
        }
        severe = !severe;
        k = e;
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Overwrite tracks within the span starting at frame `a`; returns the span
/// length in frames.
fn inject(kind: InjectionKind, t: &mut Tracks, a: usize, rate_hz: f64, rng: &mut ChaCha8Rng) -> usize {
    let frames = |s: f64| (s * rate_hz).round() as usize;
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    match kind {
        InjectionKind::HardBrake => {
            let brake = frames(uniform(rng, 2.0, 3.0));
            let hold = frames(uniform(rng, 3.0, 5.0));
            let recover = frames(uniform(rng, 4.0, 6.0));
            let floor = uniform(rng, 0.15, 0.3);
            let v0 = t.speed[a];
            let low = v0 * floor;
            for j in 0..brake {
                t.speed[a + j] = v0 - (v0 - low) * smoothstep(j as f64 / brake as f64);
            }
            for j in 0..hold {
                t.speed[a + brake + j] = (low + 0.5 * gauss(rng)).max(0.0);
            }
            let r0 = a + brake + hold;
            for j in 0..recover {
                let base = t.speed[r0 + j];
                t.speed[r0 + j] = low + (base - low) * smoothstep(j as f64 / recover as f64);
            }
            brake + hold + recover
        }
        InjectionKind::SevereWeatherMismatch => {
            let len = frames(uniform(rng, 9.0, 15.0));
            t.rain[a..a + len].fill(SEVERE);
            if rng.random::<f64>() < 0.5 {
                t.road[a..a + len].fill(DRY);
            } else {
                t.sunray[a..a + len].fill(SEVERE);
            }
            len
        }
        InjectionKind::SensorBlur => {
            let len = frames(uniform(rng, 9.0, 15.0));
            t.blur[a..a + len].fill(SEVERE);
            t.sunray[a..a + len].fill(SEVERE);
            len
        }
        InjectionKind::LaneDeparture => {
            let len = frames(uniform(rng, 9.0, 15.0));
            t.rain[a..a + len].fill(SEVERE);
            t.road[a..a + len].fill(WET);
            let drift = frames(uniform(rng, 2.0, 4.0));
            let d0 = a + (len - drift) / 2;
            let sides: &[usize] = if rng.random::<f64>() < 0.5 { &[0, 1] } else { &[1, 2] };
            for &s in sides {
                t.lanes[s][d0..d0 + drift].fill(UNSAFE);
            }
            len
        }
        InjectionKind::NearCollision => {
            let len = frames(uniform(rng, 6.0, 9.0));
            let ttc_min = uniform(rng, 0.4, 0.9);
            let offset = 0.2 * gauss(rng).clamp(-2.5, 2.5);
            for j in 0..len {
                let s = j as f64 / (len - 1) as f64;
                t.ttc[a + j] = Some(ttc_min + (4.0 - ttc_min) * (2.0 * s - 1.0).abs());
                t.lateral[a + j] = Some(offset + 0.05 * gauss(rng));
            }
            len
        }
    }
}

/// Longest span any injection kind can occupy, in seconds.
const MAX_SPAN_S: f64 = 15.0;

fn round_to(x: f64, scale: f64) -> f64 {
    (x * scale).round() / scale
}

fn to_frames(t: &Tracks, rate_hz: f64) -> Vec<Frame> {
    (0..t.speed.len())
        .map(|k| {
            let mut values = vec![None; 10];
            values[SPEED] = Some(SignalValue::Continuous(round_to(t.speed[k], 100.0)));
            values[RAIN] = Some(SignalValue::Category(t.rain[k]));
            values[SUNRAY] = Some(SignalValue::Category(t.sunray[k]));
            values[BLUR] = Some(SignalValue::Category(t.blur[k]));
            values[ROAD] = Some(SignalValue::Category(t.road[k]));
            for (s, &idx) in LANES.iter().enumerate() {
                values[idx] = Some(SignalValue::Category(t.lanes[s][k]));
            }
            values[TTC] = t.ttc[k].map(|v| SignalValue::Continuous(round_to(v, 1000.0)));
            values[LATERAL] = t.lateral[k].map(|v| SignalValue::Continuous(round_to(v, 1000.0)));
            Frame { timestamp: k as f64 / rate_hz, values }
        })
        .collect()
}

/// The schema every generated measurement uses.
pub fn driving_schema() -> SignalSchema {
    DrivingSignals::default().schema()
}

pub fn generate_measurements(
    config: &ScenarioConfig,
) -> Result<(Vec<TimeSeriesMeasurement>, Vec<InjectionRecord>), SynthError> {
    config.validate()?;
    let schema = Arc::new(driving_schema());
    let n = (config.duration_seconds * config.rate_hz).round() as usize;
    let slot = (config.slot_seconds * config.rate_hz).round() as usize;
    let margin = (2.0 * config.rate_hz) as usize;
    let max_span = (MAX_SPAN_S * config.rate_hz).ceil() as usize;
    let n_slots = n / slot;

    let results: Vec<(TimeSeriesMeasurement, Vec<InjectionRecord>)> = (0..config.n_measurements)
        .into_par_iter()
        .map(|m| {
            let id = measurement_id(m);
            let mut tracks = baseline(config, n, &mut stream_rng(config.seed, "signals", m as u64));
            let mut placement = stream_rng(config.seed, "placement", m as u64);
            let mut params = stream_rng(config.seed, "injections", m as u64);
            let mut records = Vec::new();
            for s in 0..n_slots {
                let u = placement.random::<f64>();
                let offset = placement.random::<f64>();
                let mut acc = 0.0;
                let Some(spec) = config.injections.iter().find(|spec| {
                    acc += spec.rate;
                    u < acc
                }) else {
                    continue;
                };
                let room = slot - 2 * margin - max_span;
                let a = s * slot + margin + (offset * room as f64) as usize;
                let len = inject(spec.kind, &mut tracks, a, config.rate_hz, &mut params);
                records.push(InjectionRecord {
                    measurement_id: id.clone(),
                    kind: spec.kind,
                    start_time: a as f64 / config.rate_hz,
                    end_time: (a + len) as f64 / config.rate_hz,
                });
            }
            let frames = to_frames(&tracks, config.rate_hz);
            let measurement = TimeSeriesMeasurement::new(id, Arc::clone(&schema), frames, config.rate_hz)
                .expect("generated frames match the schema");
            (measurement, records)
        })
        .collect();
    let mut measurements = Vec::with_capacity(results.len());
    let mut injections = Vec::new();
    for (m, r) in results {
        measurements.push(m);
        injections.extend(r);
    }
    Ok((measurements, injections))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Csv,
    Jsonl,
}

/// File layout of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub schema: PathBuf,
    pub measurements: PathBuf,
    pub injections: PathBuf,
}

impl DatasetLayout {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            schema: dir.join("schema.json"),
            measurements: dir.join("measurements"),
            injections: dir.join("injections.csv"),
        }
    }
}

pub fn write_dataset(
    dir: &Path,
    measurements: &[TimeSeriesMeasurement],
    injections: &[InjectionRecord],
    format: DataFormat,
) -> Result<DatasetLayout, SynthError> {
    let layout = DatasetLayout::in_dir(dir);
    fs::create_dir_all(&layout.measurements)?;
    if let Some(first) = measurements.first() {
        first.schema.save_json(&layout.schema)?;
    }
    measurements.par_iter().try_for_each(|m| -> Result<(), SynthError> {
        match format {
            DataFormat::Csv => write_measurement_csv(m, &layout.measurements.join(format!("{}.csv", m.id)))?,
            DataFormat::Jsonl => write_measurement_jsonl(m, &layout.measurements.join(format!("{}.jsonl", m.id)))?,
        }
        Ok(())
    })?;
    write_injections_csv(injections, &layout.injections)?;
    Ok(layout)
}

pub fn write_injections_csv(records: &[InjectionRecord], path: &Path) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["measurement_id", "kind", "start_time", "end_time"]).map_err(csv_io)?;
    for r in records {
        w.write_record([
            r.measurement_id.clone(),
            r.kind.to_string(),
            format!("{}", r.start_time),
            format!("{}", r.end_time),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_injections_csv(path: &Path) -> Result<Vec<InjectionRecord>, SynthError> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SynthError::Format(e.to_string()))?;
        if rec.len() != 4 {
            return Err(SynthError::Format(format!("expected 4 columns, got {}", rec.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| SynthError::Format(format!("`{s}` is not a number")));
        out.push(InjectionRecord {
            measurement_id: rec[0].to_string(),
            kind: rec[1].parse()?,
            start_time: num(&rec[2])?,
            end_time: num(&rec[3])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudShape {
    TwoRings,
    TwoMoons,
}

pub const RING_RADII: (f64, f64) = (1.0, 2.0);
/// Anomalies in the two-rings cloud sit at radii inside this band.
pub const RING_GAP_BAND: (f64, f64) = (1.35, 1.65);

#[derive(Debug, Clone, PartialEq)]
pub struct HardAnomalyCloud {
    pub points: Array2<f64>,
    /// True for planted anomalies.
    pub labels: Vec<bool>,
}

/// Inliers on two curved manifolds with a few anomalies planted in the space
/// they enclose. Inliers come first, then anomalies.
pub fn generate_hard_anomaly_cloud(
    n_inliers: usize,
    n_anomalies: usize,
    shape: CloudShape,
    noise: f64,
    seed: u64,
) -> Result<HardAnomalyCloud, SynthError> {
    if n_inliers < 2 {
        return Err(SynthError::InvalidConfig("need at least two inliers".into()));
    }
    if (n_anomalies as f64) > 0.05 * (n_inliers + n_anomalies) as f64 {
        return Err(SynthError::InvalidConfig(format!(
            "{n_anomalies} anomalies exceed 5% of {} points",
            n_inliers + n_anomalies
        )));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(SynthError::InvalidConfig(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = stream_rng(seed, "cloud", 0);
    let jitter = Normal::new(0.0, noise).expect("finite noise");
    let n = n_inliers + n_anomalies;
    let mut points = Array2::zeros((n, 2));
    let mut labels = vec![false; n];
    for i in 0..n_inliers {
        let theta = 2.0 * PI * rng.random::<f64>();
        let (x, y) = match shape {
            CloudShape::TwoRings => {
                // split inliers in proportion to circumference so both rings are equally dense
                let inner = ((i as f64 + 0.5) / n_inliers as f64) < RING_RADII.0 / (RING_RADII.0 + RING_RADII.1);
                let r = if inner { RING_RADII.0 } else { RING_RADII.1 } + jitter.sample(&mut rng);
                (r * theta.cos(), r * theta.sin())
            }
            CloudShape::TwoMoons => {
                let t = theta / 2.0;
                let (x, y) = if i % 2 == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                (x + jitter.sample(&mut rng), y + jitter.sample(&mut rng))
            }
        };
        points[[i, 0]] = x;
        points[[i, 1]] = y;
    }
    for i in n_inliers..n {
        let (x, y) = match shape {
            CloudShape::TwoRings => {
                let r = RING_GAP_BAND.0 + (RING_GAP_BAND.1 - RING_GAP_BAND.0) * rng.random::<f64>();
                let theta = 2.0 * PI * rng.random::<f64>();
                (r * theta.cos(), r * theta.sin())
            }
            CloudShape::TwoMoons => {
                // the pockets enclosed by each arc
                let (cx, cy) = if i % 2 == 0 { (0.0, 0.3) } else { (1.0, 0.2) };
                let r = 0.1 * rng.random::<f64>().sqrt();
                let theta = 2.0 * PI * rng.random::<f64>();
                (cx + r * theta.cos(), cy + r * theta.sin())
            }
        };
        points[[i, 0]] = x;
        points[[i, 1]] = y;
        labels[i] = true;
    }
    Ok(HardAnomalyCloud { points, labels })
}

pub fn write_cloud_csv(cloud: &HardAnomalyCloud, path: &Path) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["x", "y", "label"]).map_err(csv_io)?;
    for (row, &label) in cloud.points.rows().into_iter().zip(&cloud.labels) {
        w.write_record([format!("{}", row[0]), format!("{}", row[1]), u8::from(label).to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}
