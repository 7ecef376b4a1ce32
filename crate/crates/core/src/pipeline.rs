//! End-to-end orchestration: generate, ingest, featurize, label, detect,
//! evaluate and embed, each stage reading the files the previous one wrote.
//!
//! One top-level seed fans out into every stage's seed through
//! [`derive_seed`], so a run is reproducible from the config alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dif::{DeepIsolationForest, DifParams};
use crate::eval::{
    self, distribution_comparison, export_top_windows, read_scores_csv, top_k_overlap, write_histogram_csv,
    write_json, write_scores_csv, AucPair, Detector, EvalError, EvalSummary, ScoreReport, WindowScores,
    DEFAULT_BINS,
};
use crate::features::{
    build_feature_matrix, read_feature_matrix, write_feature_matrix, FeatureError, FeatureFiles, FeatureMatrix,
    FeatureOptions, WindowSpec,
};
use crate::iforest::{threshold_by_contamination, ForestError, ForestParams, IsolationForest};
use crate::ingest::{load_measurement, IngestError, LoadMode, LoadOptions, SignalSchema, TimeSeriesMeasurement};
use crate::proxy::{
    apply_rules, default_ruleset, read_labels_csv, write_labels_csv, ProxyError, ProxyLabeling, ProxyRuleSet, WindowKey,
};
use crate::seed::{derive_seed, stream_rng};
use crate::synth::{
    generate_measurements, read_injections_csv, write_dataset, DataFormat, DatasetLayout, ScenarioConfig, SynthError,
};
use crate::tsne::{embed, export_embedding, min_points, write_run_report, RunReport, TsneConfig, TsneError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingInput(_) | Self::Data(_) => 3,
            Self::Internal(_) => 4,
        }
    }
}

fn missing(path: &Path) -> PipelineError {
    PipelineError::MissingInput(path.display().to_string())
}

fn io_error(e: std::io::Error) -> PipelineError {
    PipelineError::Internal(e.to_string())
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::FileNotFound(p) => missing(&p),
            IngestError::InvalidRate(_) => Self::Config(e.to_string()),
            IngestError::Io(e) => io_error(e),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::FileNotFound(p) => missing(&p),
            FeatureError::InvalidWindowSpec(_) | FeatureError::InvalidFraction(_) => Self::Config(e.to_string()),
            FeatureError::Io(e) => io_error(e),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<ProxyError> for PipelineError {
    fn from(e: ProxyError) -> Self {
        match e {
            ProxyError::FileNotFound(p) => missing(&p),
            ProxyError::Format(_) => Self::Data(e.to_string()),
            ProxyError::Io(e) => io_error(e),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => Self::Config(e.to_string()),
            SynthError::Format(_) => Self::Data(e.to_string()),
            SynthError::Ingest(e) => e.into(),
            SynthError::Io(e) => io_error(e),
        }
    }
}

impl From<ForestError> for PipelineError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::InvalidParameter(_) | ForestError::InvalidContamination(_) => Self::Config(e.to_string()),
            ForestError::Io(e) => io_error(e),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::FileNotFound(p) => missing(&p),
            EvalError::Io(e) => io_error(e),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TsneError> for PipelineError {
    fn from(e: TsneError) -> Self {
        match e {
            TsneError::InvalidConfig(_) => Self::Config(e.to_string()),
            TsneError::DivergenceDetected(_) => Self::Internal(e.to_string()),
            TsneError::Io(e) => io_error(e),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub window: WindowSpec,
    pub sample_fraction: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { window: WindowSpec::default(), sample_fraction: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 100, bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Windows beyond this count are subsampled uniformly before t-SNE.
    pub max_points: usize,
    pub tsne: TsneConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { max_points: 2000, tsne: TsneConfig::default() }
    }
}

/// Full run configuration. Nested `seed` fields must stay unset: every stage
/// seed is derived from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Dataset directory: `schema.json`, `measurements/`, `injections.csv`.
    pub data_dir: PathBuf,
    /// Directory for every derived artifact.
    pub output_dir: PathBuf,
    pub data_format: DataFormat,
    pub load_mode: LoadMode,
    pub generator: ScenarioConfig,
    pub features: FeatureConfig,
    /// Proxy rule file; the built-in rule set when absent.
    pub rules: Option<PathBuf>,
    pub iforest: ForestParams,
    pub dif: DifParams,
    /// Expected anomaly share used to threshold detector scores.
    pub contamination: f64,
    pub eval: EvalConfig,
    pub embed: EmbedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            data_format: DataFormat::Csv,
            load_mode: LoadMode::Strict,
            generator: ScenarioConfig::default(),
            features: FeatureConfig::default(),
            rules: None,
            iforest: ForestParams::default(),
            dif: DifParams::default(),
            contamination: 0.02,
            eval: EvalConfig::default(),
            embed: EmbedConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a `.json` or `.toml` file (anything else is read as TOML).
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::Config(format!("config file not found: {}", path.display())),
            _ => io_error(e),
        })?;
        let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> Result<u64, PipelineError> {
        self.seed.ok_or_else(|| PipelineError::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.seed()?;
        for (field, seed) in [
            ("generator.seed", self.generator.seed),
            ("iforest.seed", self.iforest.seed),
            ("dif.seed", self.dif.seed),
            ("embed.tsne.seed", self.embed.tsne.seed),
        ] {
            if seed != 0 {
                return Err(PipelineError::Config(format!(
                    "`{field}` is derived from the top-level seed and must not be set"
                )));
            }
        }
        self.generator.validate()?;
        self.features.window.validate()?;
        let f = self.features.sample_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(FeatureError::InvalidFraction(f).into());
        }
        if self.iforest.n_trees == 0 || self.iforest.subsample_size < 2 {
            return Err(PipelineError::Config("iforest needs at least one tree and a subsample size of 2".into()));
        }
        if self.dif.n_representations == 0 || self.dif.trees_per_representation == 0 || self.dif.subsample_size < 2 {
            return Err(PipelineError::Config(
                "dif needs at least one representation, one tree each and a subsample size of 2".into(),
            ));
        }
        if self.dif.batch_size == 0 {
            return Err(PipelineError::Config("dif.batch_size must be positive".into()));
        }
        self.dif.network.validate()?;
        if !(self.contamination > 0.0 && self.contamination < 1.0) {
            return Err(ForestError::InvalidContamination(self.contamination).into());
        }
        if self.eval.k == 0 || self.eval.bins == 0 {
            return Err(PipelineError::Config("eval.k and eval.bins must be positive".into()));
        }
        self.embed.tsne.validate()?;
        if self.embed.max_points < min_points(self.embed.tsne.perplexity) {
            return Err(PipelineError::Config(format!(
                "embed.max_points must be at least {} for perplexity {}",
                min_points(self.embed.tsne.perplexity),
                self.embed.tsne.perplexity
            )));
        }
        Ok(())
    }

    fn stage_seed(&self, stage: &str) -> Result<u64, PipelineError> {
        Ok(derive_seed(self.seed()?, stage, 0))
    }

    pub fn layout(&self) -> OutputLayout {
        OutputLayout::in_dir(&self.output_dir)
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub ingest_report: PathBuf,
    pub features: FeatureFiles,
    pub rules: PathBuf,
    pub labels: PathBuf,
    pub scores: PathBuf,
    pub iforest_model: PathBuf,
    pub dif_model: PathBuf,
    pub detect_summary: PathBuf,
    pub eval_dir: PathBuf,
    pub embedding: PathBuf,
    pub embedding_report: PathBuf,
}

impl OutputLayout {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            ingest_report: dir.join("ingest_report.json"),
            features: FeatureFiles::in_dir(dir),
            rules: dir.join("rules.json"),
            labels: dir.join("labels.csv"),
            scores: dir.join("scores.csv"),
            iforest_model: dir.join("iforest_model.json"),
            dif_model: dir.join("dif_model.json"),
            detect_summary: dir.join("detect_summary.json"),
            eval_dir: dir.join("eval"),
            embedding: dir.join("embedding.csv"),
            embedding_report: dir.join("embedding_report.json"),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_error)
}

fn write_json_file<T: Serialize>(value: &T, path: &Path) -> Result<(), PipelineError> {
    write_json(value, path).map_err(PipelineError::from)
}

/// Generate the synthetic driving dataset into `data_dir`.
pub fn cmd_generate(config: &RunConfig) -> Result<DatasetLayout, PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let scenario = ScenarioConfig { seed: config.stage_seed("generator")?, ..config.generator.clone() };
    let (measurements, injections) = generate_measurements(&scenario)?;
    if config.data_dir.join("measurements").is_dir() {
        fs::remove_dir_all(config.data_dir.join("measurements")).map_err(io_error)?;
    }
    let layout = write_dataset(&config.data_dir, &measurements, &injections, config.data_format)?;
    log::info!(
        "generated {} measurements with {} injections in {:.2?}",
        measurements.len(),
        injections.len(),
        started.elapsed()
    );
    Ok(layout)
}

/// Per-file outcome of loading the dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestFileReport {
    pub measurement_id: String,
    pub rows_read: usize,
    pub frames: usize,
    pub rejected_rows: usize,
    pub span_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub signals: usize,
    pub files: Vec<IngestFileReport>,
}

/// Load every measurement file of the dataset, sorted by file name.
pub fn load_dataset(config: &RunConfig) -> Result<(Vec<TimeSeriesMeasurement>, IngestReport), PipelineError> {
    let layout = DatasetLayout::in_dir(&config.data_dir);
    if !layout.schema.is_file() {
        return Err(missing(&layout.schema));
    }
    let schema = Arc::new(SignalSchema::load_json(&layout.schema)?);
    let mut paths: Vec<PathBuf> = fs::read_dir(&layout.measurements)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => missing(&layout.measurements),
            _ => io_error(e),
        })?
        .map(|entry| entry.map(|e| e.path()).map_err(io_error))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.is_file());
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::MissingInput(format!("no measurement files in {}", layout.measurements.display())));
    }
    let options = LoadOptions { mode: config.load_mode, nominal_rate_hz: config.generator.rate_hz };
    let mut measurements = Vec::with_capacity(paths.len());
    let mut files = Vec::with_capacity(paths.len());
    for path in &paths {
        let outcome = load_measurement(path, Arc::clone(&schema), options)?;
        for v in &outcome.violations {
            log::warn!("{}: {v}", path.display());
        }
        let m = outcome.measurement;
        files.push(IngestFileReport {
            measurement_id: m.id.clone(),
            rows_read: outcome.rows_read,
            frames: m.frames.len(),
            rejected_rows: outcome.violations.len(),
            span_seconds: m.span_seconds(),
        });
        measurements.push(m);
    }
    Ok((measurements, IngestReport { signals: schema.len(), files }))
}

/// Validate the dataset and write a per-file ingest report.
pub fn cmd_ingest(config: &RunConfig) -> Result<IngestReport, PipelineError> {
    config.validate()?;
    let (_, report) = load_dataset(config)?;
    ensure_dir(&config.output_dir)?;
    write_json_file(&report, &config.layout().ingest_report)?;
    let rows: usize = report.files.iter().map(|f| f.frames).sum();
    log::info!("ingested {} measurements, {rows} frames", report.files.len());
    Ok(report)
}

/// Window, extract, sample and encode the dataset into the feature table.
pub fn cmd_featurize(config: &RunConfig) -> Result<FeatureMatrix, PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let (measurements, _) = load_dataset(config)?;
    let options = FeatureOptions {
        window: config.features.window,
        sample_fraction: config.features.sample_fraction,
        sample_seed: config.stage_seed("feature-sample")?,
        ..FeatureOptions::default()
    };
    let matrix = build_feature_matrix(&measurements, &options)?;
    ensure_dir(&config.output_dir)?;
    write_feature_matrix(&matrix, &config.layout().features)?;
    log::info!(
        "featurized {} windows x {} columns in {:.2?}",
        matrix.len(),
        matrix.schema.width(),
        started.elapsed()
    );
    Ok(matrix)
}

fn load_rules(config: &RunConfig) -> Result<ProxyRuleSet, PipelineError> {
    match &config.rules {
        Some(path) => Ok(ProxyRuleSet::load_json(path)?),
        None => Ok(default_ruleset()),
    }
}

/// Apply the proxy rules to the feature table and write the labels.
pub fn cmd_label(config: &RunConfig) -> Result<ProxyLabeling, PipelineError> {
    config.validate()?;
    let rules = load_rules(config)?;
    let layout = config.layout();
    let matrix = read_feature_matrix(&layout.features)?;
    let labels = apply_rules(&rules, &matrix)?;
    rules.save_json(&layout.rules)?;
    write_labels_csv(&labels, &layout.labels)?;
    log::info!(
        "labeled {} of {} windows as proxy anomalies ({:.2}%)",
        labels.flagged_count(),
        labels.entries.len(),
        100.0 * labels.prevalence()
    );
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorSummary {
    pub threshold: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectSummary {
    pub n_windows: usize,
    pub n_features: usize,
    pub contamination: f64,
    pub dif: DetectorSummary,
    #[serde(rename = "if")]
    pub iforest: DetectorSummary,
}

/// Fit IF and DIF on the whole feature table and score the same rows.
pub fn cmd_detect(config: &RunConfig) -> Result<DetectSummary, PipelineError> {
    config.validate()?;
    let layout = config.layout();
    let matrix = read_feature_matrix(&layout.features)?;
    let x = matrix.to_array();

    let started = Instant::now();
    let iforest = IsolationForest::fit(x.view(), ForestParams { seed: config.stage_seed("iforest")?, ..config.iforest })?;
    let score_if = iforest.score_all(x.view())?;
    log::info!("isolation forest: {} trees in {:.2?}", config.iforest.n_trees, started.elapsed());

    let started = Instant::now();
    let dif_params = DifParams { seed: config.stage_seed("dif")?, ..config.dif.clone() };
    let dif = DeepIsolationForest::fit(x.view(), &dif_params)?;
    let score_dif = dif.score_all(x.view())?;
    log::info!("deep isolation forest: {} trees in {:.2?}", dif_params.total_trees(), started.elapsed());

    let scores: Vec<WindowScores> = matrix
        .rows
        .iter()
        .zip(score_dif.iter().zip(&score_if))
        .map(|(row, (&d, &i))| WindowScores { window_ref: row.window_ref.clone(), score_dif: d, score_if: i })
        .collect();
    write_scores_csv(&scores, &layout.scores)?;
    iforest.save_json(&layout.iforest_model)?;
    dif.save_json(&layout.dif_model)?;

    let summarize = |s: &[f64]| -> Result<DetectorSummary, PipelineError> {
        let (threshold, flags) = threshold_by_contamination(s, config.contamination)?;
        Ok(DetectorSummary { threshold, flagged: flags.iter().filter(|&&f| f).count() })
    };
    let summary = DetectSummary {
        n_windows: matrix.len(),
        n_features: matrix.schema.width(),
        contamination: config.contamination,
        dif: summarize(&score_dif)?,
        iforest: summarize(&score_if)?,
    };
    write_json_file(&summary, &layout.detect_summary)?;
    Ok(summary)
}

/// Join scores, labels and (when present) injections into one report.
pub fn load_report(config: &RunConfig) -> Result<ScoreReport, PipelineError> {
    let layout = config.layout();
    let scores = read_scores_csv(&layout.scores)?;
    let labels = read_labels_csv(&layout.labels)?;
    let injections_path = DatasetLayout::in_dir(&config.data_dir).injections;
    let injections = if injections_path.is_file() { Some(read_injections_csv(&injections_path)?) } else { None };
    Ok(ScoreReport::assemble(&scores, &labels, injections.as_deref(), config.features.window.window_seconds)?)
}

fn auc_or_none(report: &ScoreReport, truth: &[bool]) -> Result<Option<AucPair>, PipelineError> {
    match AucPair::compute(report, truth) {
        Ok(pair) => Ok(Some(pair)),
        Err(EvalError::SingleClass) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Write every evaluation artifact into `output_dir/eval`.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalSummary, PipelineError> {
    config.validate()?;
    let layout = config.layout();
    let report = load_report(config)?;
    let matrix = read_feature_matrix(&layout.features)?;
    let seed = config.stage_seed("eval")?;
    let k = config.eval.k;

    let overlap = top_k_overlap(&report, k, seed)?;
    let distribution_dif = distribution_comparison(&report, Detector::Dif, seed, config.eval.bins)?;
    let distribution_if = distribution_comparison(&report, Detector::IForest, seed, config.eval.bins)?;
    let proxy_truth: Vec<bool> = report.rows.iter().map(|r| r.is_proxy()).collect();
    let injected_truth: Vec<bool> = report.rows.iter().map(|r| r.injection.is_some()).collect();
    let has_injections = DatasetLayout::in_dir(&config.data_dir).injections.is_file();

    let dir = &layout.eval_dir;
    ensure_dir(dir)?;
    report.write_csv(&dir.join("report.csv"))?;
    overlap.write_csv(&dir.join("overlap.csv"))?;
    fs::write(dir.join("overlap.txt"), overlap.render()).map_err(io_error)?;
    write_histogram_csv(&distribution_dif, &dir.join("hist_dif.csv"))?;
    write_histogram_csv(&distribution_if, &dir.join("hist_if.csv"))?;
    for detector in [Detector::Dif, Detector::IForest] {
        let name = format!("top_windows_{}.csv", detector.label().to_lowercase());
        export_top_windows(&report, &matrix.schema, &matrix.raw, detector, k, &dir.join(name))?;
    }
    let summary = EvalSummary {
        n_windows: report.len(),
        n_proxy: report.proxy_count(),
        prevalence: report.prevalence(),
        overlap,
        distribution_dif,
        distribution_if,
        auc_proxy: auc_or_none(&report, &proxy_truth)?,
        auc_injected: if has_injections { auc_or_none(&report, &injected_truth)? } else { None },
    };
    eval::write_json(&summary, &dir.join("summary.json"))?;
    Ok(summary)
}

/// t-SNE of the standardized feature rows, subsampled to `embed.max_points`.
pub fn cmd_embed(config: &RunConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let layout = config.layout();
    let matrix = read_feature_matrix(&layout.features)?;
    let labels = read_labels_csv(&layout.labels)?;
    let by_window = labels.by_window();

    let n = matrix.len();
    let mut picked: Vec<usize> = if n > config.embed.max_points {
        let mut rng = stream_rng(config.seed()?, "embed-sample", 0);
        rand::seq::index::sample(&mut rng, n, config.embed.max_points).into_vec()
    } else {
        (0..n).collect()
    };
    picked.sort_unstable();
    let width = matrix.schema.width();
    let mut x = Array2::<f64>::zeros((picked.len(), width));
    for (r, &i) in picked.iter().enumerate() {
        x.row_mut(r).assign(&ArrayView1::from(&matrix.rows[i].values));
    }
    let windows: Vec<_> = picked.iter().map(|&i| matrix.rows[i].window_ref.clone()).collect();
    let flags = windows
        .iter()
        .map(|w| {
            by_window
                .get(&WindowKey::of(w))
                .map(|e| e.is_proxy())
                .ok_or_else(|| PipelineError::Data(format!("window {w} has no proxy label")))
        })
        .collect::<Result<Vec<bool>, _>>()?;

    let started = Instant::now();
    let tsne = TsneConfig { seed: config.stage_seed("tsne")?, ..config.embed.tsne.clone() };
    let embedding = embed(x.view(), &tsne)?;
    log::info!("t-SNE on {} points in {:.2?}, final KL {:.4}", picked.len(), started.elapsed(), embedding.final_kl);
    export_embedding(&embedding, &flags, &windows, &layout.embedding)?;
    let report = RunReport { config: tsne, n_points: picked.len(), iterations: embedding.kl_history.len(), final_kl: embedding.final_kl };
    write_run_report(&report, &layout.embedding_report)?;
    Ok(report)
}
