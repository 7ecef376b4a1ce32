//! Evaluation of detector scores against proxy labels and injected ground
//! truth: score distributions, top-k overlap tables, ROC-AUC and export of
//! the highest-scoring windows.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureSchema, RawFeatures, WindowRef};
use crate::ingest::csv_io;
use crate::proxy::{ProxyLabeling, WindowKey};
use crate::seed::stream_rng;
use crate::synth::{InjectionKind, InjectionRecord};

pub const DEFAULT_BINS: usize = 30;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no window carries a proxy label")]
    EmptyProxySet,
    #[error("need {needed} normal windows for the comparison sample, only {available} exist")]
    InsufficientNormal { needed: usize, available: usize },
    #[error("asked for the top {k} of only {n} windows")]
    TooFewWindows { k: usize, n: usize },
    #[error("ROC-AUC needs both classes present")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("window {0} has no proxy label")]
    MissingLabel(String),
    #[error("score file is malformed: {0}")]
    Format(String),
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    Dif,
    #[serde(rename = "if")]
    IForest,
}

impl Detector {
    pub fn label(self) -> &'static str {
        match self {
            Detector::Dif => "DIF",
            Detector::IForest => "IF",
        }
    }
}

/// Detector scores of one window, as written by the detection stage.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub window_ref: WindowRef,
    pub score_dif: f64,
    pub score_if: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub window_ref: WindowRef,
    pub score_dif: f64,
    pub score_if: f64,
    pub matched_rules: Vec<String>,
    /// Kind of the first injection overlapping the window, if any.
    pub injection: Option<InjectionKind>,
}

impl ScoreRow {
    pub fn is_proxy(&self) -> bool {
        !self.matched_rules.is_empty()
    }

    pub fn score(&self, detector: Detector) -> f64 {
        match detector {
            Detector::Dif => self.score_dif,
            Detector::IForest => self.score_if,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    /// Join scores with proxy labels (by window) and optional injections.
    /// `window_seconds` is the window length used to test injection overlap.
    pub fn assemble(
        scores: &[WindowScores],
        labels: &ProxyLabeling,
        injections: Option<&[InjectionRecord]>,
        window_seconds: f64,
    ) -> Result<Self, EvalError> {
        let by_window = labels.by_window();
        let mut spans: HashMap<&str, Vec<&InjectionRecord>> = HashMap::new();
        for r in injections.unwrap_or_default() {
            spans.entry(r.measurement_id.as_str()).or_default().push(r);
        }
        let rows = scores
            .iter()
            .map(|s| {
                let label = by_window
                    .get(&WindowKey::of(&s.window_ref))
                    .ok_or_else(|| EvalError::MissingLabel(s.window_ref.to_string()))?;
                let start = s.window_ref.start_time;
                let injection = spans.get(s.window_ref.measurement_id.as_str()).and_then(|rs| {
                    rs.iter().find(|r| r.overlaps(start, start + window_seconds)).map(|r| r.kind)
                });
                Ok(ScoreRow {
                    window_ref: s.window_ref.clone(),
                    score_dif: s.score_dif,
                    score_if: s.score_if,
                    matched_rules: label.matched_rules.clone(),
                    injection,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn proxy_count(&self) -> usize {
        self.rows.iter().filter(|r| r.is_proxy()).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.proxy_count() as f64 / self.rows.len().max(1) as f64
    }

    pub fn scores(&self, detector: Detector) -> Vec<f64> {
        self.rows.iter().map(|r| r.score(detector)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(["measurement_id", "window_start", "score_dif", "score_if", "proxy_label", "matched_rules", "injection"])
            .map_err(csv_io)?;
        for r in &self.rows {
            w.write_record([
                r.window_ref.measurement_id.clone(),
                format!("{}", r.window_ref.start_time),
                format!("{}", r.score_dif),
                format!("{}", r.score_if),
                u8::from(r.is_proxy()).to_string(),
                r.matched_rules.join(";"),
                r.injection.map(|k| k.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn not_found(e: std::io::Error, path: &Path) -> EvalError {
    if e.kind() == std::io::ErrorKind::NotFound {
        EvalError::FileNotFound(path.to_path_buf())
    } else {
        EvalError::Io(e)
    }
}

pub fn write_scores_csv(scores: &[WindowScores], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["measurement_id", "window_start", "score_dif", "score_if"]).map_err(csv_io)?;
    for s in scores {
        w.write_record([
            s.window_ref.measurement_id.clone(),
            format!("{}", s.window_ref.start_time),
            format!("{}", s.score_dif),
            format!("{}", s.score_if),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<WindowScores>, EvalError> {
    let f = File::open(path).map_err(|e| not_found(e, path))?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(f));
    let num = |s: &str| s.parse::<f64>().map_err(|_| EvalError::Format(format!("`{s}` is not a number")));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EvalError::Format(e.to_string()))?;
        if rec.len() != 4 {
            return Err(EvalError::Format(format!("expected 4 columns, got {}", rec.len())));
        }
        out.push(WindowScores {
            window_ref: WindowRef { measurement_id: rec[0].to_string(), start_time: num(&rec[1])? },
            score_dif: num(&rec[2])?,
            score_if: num(&rec[3])?,
        });
    }
    Ok(out)
}

/// Rank-based ROC-AUC (Mann-Whitney U); tied scores count one half.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::LengthMismatch(scores.len(), truth.len()));
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the mid rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| truth[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count_proxy: usize,
    pub count_normal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionSummary {
    pub detector: Detector,
    #[serde(skip)]
    pub proxy_scores: Vec<f64>,
    #[serde(skip)]
    pub normal_scores: Vec<f64>,
    #[serde(skip)]
    pub histogram: Vec<HistogramBin>,
    pub n_per_set: usize,
    pub mean_proxy: f64,
    pub mean_normal: f64,
    pub median_proxy: f64,
    pub median_normal: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Uniform bins over `[0, 1]`; a score of exactly 1 lands in the last bin.
pub fn histogram(proxy: &[f64], normal: &[f64], bins: usize) -> Vec<HistogramBin> {
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            bin_left: b as f64 / bins as f64,
            bin_right: (b + 1) as f64 / bins as f64,
            count_proxy: 0,
            count_normal: 0,
        })
        .collect();
    let bin = |s: f64| ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
    for &s in proxy {
        out[bin(s)].count_proxy += 1;
    }
    for &s in normal {
        out[bin(s)].count_normal += 1;
    }
    out
}

/// Indices of rows in canonical window order.
fn canonical_order(report: &ScoreReport) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..report.rows.len()).collect();
    idx.sort_by(|&a, &b| report.rows[a].window_ref.cmp_key(&report.rows[b].window_ref));
    idx
}

/// Compare proxy-window scores with an equally sized uniform sample (without
/// replacement) of non-proxy windows.
pub fn distribution_comparison(
    report: &ScoreReport,
    detector: Detector,
    sample_seed: u64,
    bins: usize,
) -> Result<DistributionSummary, EvalError> {
    let order = canonical_order(report);
    let (proxy, normal): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| report.rows[i].is_proxy());
    if proxy.is_empty() {
        return Err(EvalError::EmptyProxySet);
    }
    if normal.len() < proxy.len() {
        return Err(EvalError::InsufficientNormal { needed: proxy.len(), available: normal.len() });
    }
    let mut rng = stream_rng(sample_seed, "normal-sample", 0);
    let mut picked: Vec<usize> = sample(&mut rng, normal.len(), proxy.len()).into_iter().map(|k| normal[k]).collect();
    picked.sort_unstable();
    let proxy_scores: Vec<f64> = proxy.iter().map(|&i| report.rows[i].score(detector)).collect();
    let normal_scores: Vec<f64> = picked.iter().map(|&i| report.rows[i].score(detector)).collect();
    Ok(DistributionSummary {
        detector,
        histogram: histogram(&proxy_scores, &normal_scores, bins.max(1)),
        n_per_set: proxy_scores.len(),
        mean_proxy: mean(&proxy_scores),
        mean_normal: mean(&normal_scores),
        median_proxy: median(&proxy_scores),
        median_normal: median(&normal_scores),
        proxy_scores,
        normal_scores,
    })
}

pub fn write_histogram_csv(summary: &DistributionSummary, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["bin_left", "bin_right", "count_proxy", "count_normal"]).map_err(csv_io)?;
    for b in &summary.histogram {
        w.write_record([
            format!("{}", b.bin_left),
            format!("{}", b.bin_right),
            b.count_proxy.to_string(),
            b.count_normal.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Row indices of the `k` highest scores; equal scores are taken in window
/// order (measurement id, then start time).
pub fn top_k(report: &ScoreReport, detector: Detector, k: usize) -> Result<Vec<usize>, EvalError> {
    let n = report.rows.len();
    if k > n {
        return Err(EvalError::TooFewWindows { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&report.rows[a], &report.rows[b]);
        rb.score(detector)
            .total_cmp(&ra.score(detector))
            .then_with(|| ra.window_ref.cmp_key(&rb.window_ref))
    });
    idx.truncate(k);
    Ok(idx)
}

/// `k` rows drawn uniformly without replacement.
pub fn random_k(report: &ScoreReport, k: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    let n = report.rows.len();
    if k > n {
        return Err(EvalError::TooFewWindows { k, n });
    }
    let order = canonical_order(report);
    let mut rng = stream_rng(seed, "random-k", 0);
    Ok(sample(&mut rng, n, k).into_iter().map(|i| order[i]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapRow {
    pub events: String,
    pub in_normal: usize,
    pub in_proxy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapTable {
    pub k: usize,
    pub rows: Vec<OverlapRow>,
}

impl OverlapTable {
    pub fn row(&self, events_prefix: &str) -> Option<&OverlapRow> {
        self.rows.iter().find(|r| r.events.starts_with(events_prefix))
    }

    /// Aligned text with one line per selection.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.events.len()).max().unwrap_or(0).max("Events".len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$} | {:>10} | {:>9}", "Events", "Normal set", "Proxy set");
        let _ = writeln!(s, "{}-+-{}-+-{}", "-".repeat(width), "-".repeat(10), "-".repeat(9));
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$} | {:>10} | {:>9}", r.events, r.in_normal, r.in_proxy);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(["events", "normal_set", "proxy_set"]).map_err(csv_io)?;
        for r in &self.rows {
            w.write_record([r.events.clone(), r.in_normal.to_string(), r.in_proxy.to_string()]).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Split each selection into proxy and normal windows: top-k of DIF, top-k
/// of IF and a seeded random draw of k windows.
pub fn top_k_overlap(report: &ScoreReport, k: usize, seed: u64) -> Result<OverlapTable, EvalError> {
    let count = |idx: &[usize]| {
        let p = idx.iter().filter(|&&i| report.rows[i].is_proxy()).count();
        (idx.len() - p, p)
    };
    let mut rows = Vec::with_capacity(3);
    for d in [Detector::Dif, Detector::IForest] {
        let (in_normal, in_proxy) = count(&top_k(report, d, k)?);
        rows.push(OverlapRow { events: format!("Top {k} of {}", d.label()), in_normal, in_proxy });
    }
    let (in_normal, in_proxy) = count(&random_k(report, k, seed)?);
    rows.push(OverlapRow { events: format!("Random {k}"), in_normal, in_proxy });
    Ok(OverlapTable { k, rows })
}

/// Write the `k` highest-scoring windows with their raw features, proxy rules
/// and time span, sorted by descending score.
pub fn export_top_windows(
    report: &ScoreReport,
    schema: &FeatureSchema,
    raw: &[RawFeatures],
    detector: Detector,
    k: usize,
    path: &Path,
) -> Result<(), EvalError> {
    let top = top_k(report, detector, k)?;
    let by_window: HashMap<WindowKey, &RawFeatures> = raw.iter().map(|r| (WindowKey::of(&r.window_ref), r)).collect();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header: Vec<String> =
        ["rank", "measurement_id", "window_start", "window_end", "score", "score_dif", "score_if"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend(schema.raw_continuous.iter().cloned());
    header.extend(schema.categorical_features.iter().map(|c| c.name.clone()));
    header.extend(["proxy_label", "matched_rules", "injection"].iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_io)?;
    for (rank, &i) in top.iter().enumerate() {
        let row = &report.rows[i];
        let features = by_window
            .get(&WindowKey::of(&row.window_ref))
            .ok_or_else(|| EvalError::Format(format!("no raw features for window {}", row.window_ref)))?;
        let mut rec = vec![
            (rank + 1).to_string(),
            row.window_ref.measurement_id.clone(),
            format!("{}", row.window_ref.start_time),
            format!("{}", features.end_time),
            format!("{}", row.score(detector)),
            format!("{}", row.score_dif),
            format!("{}", row.score_if),
        ];
        rec.extend(features.continuous.iter().map(|v| format!("{v}")));
        rec.extend(features.categorical.iter().cloned());
        rec.push(u8::from(row.is_proxy()).to_string());
        rec.push(row.matched_rules.join(";"));
        rec.push(row.injection.map(|k| k.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucPair {
    pub dif: f64,
    #[serde(rename = "if")]
    pub iforest: f64,
}

impl AucPair {
    pub fn compute(report: &ScoreReport, truth: &[bool]) -> Result<Self, EvalError> {
        Ok(Self {
            dif: roc_auc(&report.scores(Detector::Dif), truth)?,
            iforest: roc_auc(&report.scores(Detector::IForest), truth)?,
        })
    }
}

/// Scalar results of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub n_windows: usize,
    pub n_proxy: usize,
    pub prevalence: f64,
    pub overlap: OverlapTable,
    pub distribution_dif: DistributionSummary,
    pub distribution_if: DistributionSummary,
    /// Proxy labels as ground truth.
    pub auc_proxy: Option<AucPair>,
    /// Windows overlapping an injected span as ground truth.
    pub auc_injected: Option<AucPair>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
