//! Acceptance suite. Runs every criterion in order and prints one
//! `[PASS]`/`[FAIL]` line each; exits non-zero when any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView1};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use raredrive::dif::{DeepIsolationForest, DifParams};
use raredrive::eval::{roc_auc, EvalSummary};
use raredrive::features::{relative_speed_range, segment, ttc_riskiness, WindowSpec};
use raredrive::iforest::{c, score_from_path_length, ForestParams, IsolationForest, IsolationTree, TreeNode};
use raredrive::ingest::{Frame, SignalSchema, SignalSpec, SignalValue, TimeSeriesMeasurement};
use raredrive::pipeline::{cmd_detect, cmd_eval, cmd_featurize, cmd_generate, cmd_ingest, cmd_label, RunConfig};
use raredrive::synth::{generate_hard_anomaly_cloud, CloudShape};
use raredrive::tsne::{conditional_affinities, embed, kl_divergence, kl_gradient, pairwise_affinities, TsneConfig};

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(started: Instant, budget: Duration, detail: String) -> Outcome {
    let elapsed = started.elapsed();
    if elapsed <= budget {
        Ok(format!("{detail}; {:.1} s", elapsed.as_secs_f64()))
    } else {
        Err(format!("{detail}; took {:.1} s, budget {} s", elapsed.as_secs_f64(), budget.as_secs()))
    }
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

fn formula_exactness() -> Outcome {
    let started = Instant::now();
    for m in [2usize, 3, 10, 64, 256, 1000] {
        let s = score_from_path_length(c(m), m);
        if (s - 0.5).abs() > 1e-12 {
            return Err(format!("score at E(h)=c({m}) is {s}"));
        }
    }
    if c(1) != 0.0 || c(2) != 1.0 {
        return Err(format!("c(1)={}, c(2)={}", c(1), c(2)));
    }
    let c256 = c(256);
    if (c256 - 10.244).abs() > 1e-3 {
        return Err(format!("c(256)={c256}"));
    }
    within_budget(started, Duration::from_secs(1), format!("s(c(m), m)=0.5, c(1)=0, c(2)=1, c(256)={c256:.4}"))
}

/// Harmonic-number approximation written out independently of the library.
fn naive_c(m: usize) -> f64 {
    if m <= 1 {
        0.0
    } else if m == 2 {
        1.0
    } else {
        let h = ((m - 1) as f64).ln() + 0.5772156649;
        2.0 * h - 2.0 * (m as f64 - 1.0) / m as f64
    }
}

fn naive_path(tree: &IsolationTree, node: usize, x: ArrayView1<'_, f64>, depth: f64) -> f64 {
    match &tree.nodes[node] {
        TreeNode::Internal { feature, split, left, right } => {
            let next = if x[*feature] < *split { *left } else { *right };
            naive_path(tree, next, x, depth + 1.0)
        }
        TreeNode::External { size } => depth + naive_c(*size),
    }
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut checked = 0usize;
    for instance in 0..150 {
        let n = rng.random_range(2..=32);
        let d = rng.random_range(1..=3);
        let mut x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        // some duplicated values, so leaves with several rows occur
        for i in 0..n / 4 {
            let src = x.row(0).to_owned();
            x.row_mut(i + 1).assign(&src);
        }
        if x.outer_iter().all(|r| r == x.row(0)) {
            continue;
        }
        let params = ForestParams {
            n_trees: rng.random_range(1..=8),
            subsample_size: rng.random_range(2..=40),
            seed: instance,
        };
        let model = IsolationForest::fit(x.view(), params).map_err(|e| e.to_string())?;
        let probes = Array2::from_shape_fn((8, d), |_| 2.0 * rng.sample::<f64, _>(StandardNormal));
        for row in x.outer_iter().chain(probes.outer_iter()) {
            let per_tree: Vec<f64> = model.trees.iter().map(|t| naive_path(t, 0, row, 0.0)).collect();
            for (t, expect) in model.trees.iter().zip(&per_tree) {
                let got = t.path_length(row);
                if (got - expect).abs() > 1e-12 {
                    return Err(format!("instance {instance}: tree path {got} vs naive {expect}"));
                }
            }
            let mean = per_tree.iter().sum::<f64>() / per_tree.len() as f64;
            let got = model.mean_path_length(row).map_err(|e| e.to_string())?;
            if (got - mean).abs() > 1e-12 {
                return Err(format!("instance {instance}: mean path {got} vs naive {mean}"));
            }
            checked += 1;
        }
    }
    within_budget(started, Duration::from_secs(10), format!("{checked} rows over 150 instances match to 1e-12"))
}

fn speed_measurement(id: &str, seconds: f64, speed: impl Fn(f64) -> f64) -> TimeSeriesMeasurement {
    let schema = Arc::new(SignalSchema::new(vec![SignalSpec::continuous("speed", "km/h")]).unwrap());
    let n = (seconds * 10.0).round() as usize;
    let frames = (0..n)
        .map(|i| {
            let t = i as f64 / 10.0;
            Frame { timestamp: t, values: vec![Some(SignalValue::Continuous(speed(t)))] }
        })
        .collect();
    TimeSeriesMeasurement::new(id, schema, frames, 10.0).unwrap()
}

fn feature_formulas() -> Outcome {
    let started = Instant::now();
    let spec = WindowSpec::default();
    let mut quoted = Vec::new();
    for (from, to, expect) in [(200.0, 180.0, 0.1), (30.0, 10.0, 0.67)] {
        let m = speed_measurement("brake", 6.0, |t| from + (to - from) * t / 5.9);
        let w = &segment(&m, &spec).map_err(|e| e.to_string())?[0];
        let got = relative_speed_range(w, "speed").map_err(|e| e.to_string())?;
        if (got - expect).abs() > 1e-2 {
            return Err(format!("{from}->{to} km/h gives {got}, expected {expect}"));
        }
        quoted.push(got);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let ttc = rng.random_range(0.05..20.0);
        let lateral = rng.random_range(-5.0..5.0);
        let direct = (1.0 / ttc) * f64::max(0.0, (2.2 - f64::abs(lateral)) / 2.2);
        let got = ttc_riskiness(ttc, lateral).map_err(|e| e.to_string())?;
        worst = worst.max((got - direct).abs());
    }
    if worst > 1e-12 {
        return Err(format!("ttc riskiness deviates by {worst:e}"));
    }
    within_budget(
        started,
        Duration::from_secs(1),
        format!("rsr {:.4} and {:.4}; ttc riskiness max deviation {worst:e} over 1000 pairs", quoted[0], quoted[1]),
    )
}

fn windowing() -> Outcome {
    let started = Instant::now();
    let m = speed_measurement("m", 60.0, |_| 50.0);
    let count = segment(&m, &WindowSpec::default()).map_err(|e| e.to_string())?.len();
    if count != 19 {
        return Err(format!("60 s at 10 Hz gave {count} windows"));
    }
    let mut runner = TestRunner::new(PropConfig { cases: 500, failure_persistence: None, ..PropConfig::default() });
    let strategy = (10usize..1500, 0.5f64..30.0, 0.05f64..1.0);
    runner
        .run(&strategy, |(frames, window, step_share)| {
            let span = frames as f64 / 10.0;
            let spec = WindowSpec { window_seconds: window, step_seconds: (window * step_share).max(0.05) };
            // oracle: enumerate start offsets k * step while the window still fits
            let mut expected = 0usize;
            while expected as f64 * spec.step_seconds + spec.window_seconds <= span + 1e-6 {
                expected += 1;
            }
            prop_assert_eq!(spec.window_count(span), expected);
            let m = speed_measurement("p", span, |_| 80.0);
            match segment(&m, &spec) {
                Ok(w) => prop_assert_eq!(w.len(), expected),
                Err(_) => prop_assert_eq!(expected, 0),
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    within_budget(started, Duration::from_secs(5), "19 windows; closed form matches 500 random triples".into())
}

/// Per-coordinate z-score, the same standardization the feature table uses.
fn standardize(mut x: Array2<f64>) -> Array2<f64> {
    for mut col in x.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    x
}

fn hard_anomaly_separation() -> Outcome {
    let started = Instant::now();
    let (mut dif_auc, mut if_auc) = (Vec::new(), Vec::new());
    for seed in 0..10u64 {
        let cloud = generate_hard_anomaly_cloud(2000, 40, CloudShape::TwoRings, 0.05, seed).map_err(|e| e.to_string())?;
        let x = standardize(cloud.points.clone());
        let dif = DeepIsolationForest::fit(x.view(), &DifParams { seed, ..DifParams::default() })
            .map_err(|e| e.to_string())?;
        let iforest =
            IsolationForest::fit(x.view(), ForestParams { seed, ..ForestParams::default() }).map_err(|e| e.to_string())?;
        let sd = dif.score_all(x.view()).map_err(|e| e.to_string())?;
        let si = iforest.score_all(x.view()).map_err(|e| e.to_string())?;
        dif_auc.push(roc_auc(&sd, &cloud.labels).map_err(|e| e.to_string())?);
        if_auc.push(roc_auc(&si, &cloud.labels).map_err(|e| e.to_string())?);
    }
    let (md, mi) = (median(&dif_auc), median(&if_auc));
    let detail = format!("median AUC DIF {md:.3}, IF {mi:.3}, gap {:.3}", md - mi);
    if md < 0.85 || md - mi < 0.03 {
        return Err(detail);
    }
    within_budget(started, Duration::from_secs(300), detail)
}

struct BenchmarkRun {
    seed: u64,
    _root: tempfile::TempDir,
    config: RunConfig,
    summary: EvalSummary,
    elapsed: Duration,
}

fn run_pipeline(config: &RunConfig) -> Result<EvalSummary, String> {
    cmd_generate(config).map_err(|e| e.to_string())?;
    cmd_ingest(config).map_err(|e| e.to_string())?;
    cmd_featurize(config).map_err(|e| e.to_string())?;
    cmd_label(config).map_err(|e| e.to_string())?;
    cmd_detect(config).map_err(|e| e.to_string())?;
    cmd_eval(config).map_err(|e| e.to_string())
}

fn benchmark_config(seed: u64, root: &Path) -> RunConfig {
    RunConfig {
        seed: Some(seed),
        data_dir: root.join("data"),
        output_dir: root.join("out"),
        ..RunConfig::default()
    }
}

fn benchmark_runs() -> Result<Vec<BenchmarkRun>, String> {
    (1..=5u64)
        .map(|seed| {
            let root = tempfile::tempdir().map_err(|e| e.to_string())?;
            let config = benchmark_config(seed, root.path());
            let started = Instant::now();
            let summary = run_pipeline(&config)?;
            Ok(BenchmarkRun { seed, _root: root, config, summary, elapsed: started.elapsed() })
        })
        .collect()
}

fn overlap_experiment(runs: &[BenchmarkRun]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for run in runs {
        let s = &run.summary;
        let p = s.prevalence;
        let k = s.overlap.k as f64;
        let get = |prefix: &str| s.overlap.row(prefix).map(|r| r.in_proxy).unwrap_or(usize::MAX);
        let (dif, iforest, random) = (get("Top 100 of DIF"), get("Top 100 of IF"), get("Random 100"));
        let expected = k * p;
        let sd = (k * p * (1.0 - p)).sqrt();
        let pass = s.n_windows >= 10_000
            && (0.01..=0.03).contains(&p)
            && dif >= iforest
            && (random as f64 - expected).abs() <= 3.0 * sd
            && dif as f64 >= 2.0 * expected;
        ok &= pass;
        lines.push(format!(
            "seed {}: {} windows, prevalence {:.2}%, DIF {dif} IF {iforest} random {random} (expected {expected:.1} +- {:.1})",
            run.seed,
            s.n_windows,
            100.0 * p,
            3.0 * sd
        ));
    }
    let cpu: Duration = runs.iter().map(|r| r.elapsed).sum();
    let detail = format!("{}; {:.0} s total", lines.join("; "), cpu.as_secs_f64());
    check(ok && cpu <= Duration::from_secs(600), detail)
}

fn distribution_shift(runs: &[BenchmarkRun]) -> Outcome {
    let mut ok = true;
    let gaps: Vec<String> = runs
        .iter()
        .map(|run| {
            let d = &run.summary.distribution_dif;
            let gap = d.mean_proxy - d.mean_normal;
            ok &= gap >= 0.05;
            format!("seed {}: {:.3} - {:.3} = {gap:.3}", run.seed, d.mean_proxy, d.mean_normal)
        })
        .collect();
    check(ok, format!("mean DIF score proxy - normal: {}", gaps.join("; ")))
}

fn two_clusters(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((80, 5), |(i, j)| {
        let centre = if i < 40 { 0.0 } else if j == 0 { 20.0 } else { 0.0 };
        centre + rng.sample::<f64, _>(StandardNormal)
    })
}

fn centroid(y: &Array2<f64>, rows: std::ops::Range<usize>) -> Array1<f64> {
    let n = rows.len() as f64;
    rows.map(|i| y.row(i).to_owned()).fold(Array1::zeros(2), |a, b| a + b) / n
}

fn tsne_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array2::from_shape_fn((120, 6), |_| rng.sample::<f64, _>(StandardNormal));
    let mut worst_entropy = 0.0f64;
    for perplexity in [5.0, 15.0, 30.0] {
        let p = conditional_affinities(x.view(), perplexity).map_err(|e| e.to_string())?;
        for row in p.outer_iter() {
            let h: f64 = -row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
            worst_entropy = worst_entropy.max((h - perplexity.ln()).abs());
        }
    }
    if worst_entropy > 1e-5 {
        return Err(format!("row entropy off target by {worst_entropy:e}"));
    }

    let small = Array2::from_shape_fn((10, 4), |_| rng.sample::<f64, _>(StandardNormal));
    let p = pairwise_affinities(small.view(), 3.0).map_err(|e| e.to_string())?;
    let y = Array2::from_shape_fn((10, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let grad = kl_gradient(p.view(), y.view(), 1.0);
    let h = 1e-6;
    let mut worst_grad = 0.0f64;
    for i in 0..10 {
        for d in 0..2 {
            let (mut up, mut down) = (y.clone(), y.clone());
            up[[i, d]] += h;
            down[[i, d]] -= h;
            let fd = (kl_divergence(p.view(), up.view()) - kl_divergence(p.view(), down.view())) / (2.0 * h);
            worst_grad = worst_grad.max((grad[[i, d]] - fd).abs() / fd.abs().max(1e-8));
        }
    }
    if worst_grad > 1e-4 {
        return Err(format!("gradient relative error {worst_grad:e}"));
    }

    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let rows = two_clusters(100 + seed);
        let e = embed(rows.view(), &TsneConfig { perplexity: 20.0, seed, ..TsneConfig::default() })
            .map_err(|e| e.to_string())?;
        let (a, b) = (centroid(&e.coords, 0..40), centroid(&e.coords, 40..80));
        let rms = |c: &Array1<f64>, r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            (r.map(|i| (&e.coords.row(i) - c).mapv(|v| v * v).sum()).sum::<f64>() / n).sqrt()
        };
        let radius = rms(&a, 0..40).max(rms(&b, 40..80));
        let dist = (&a - &b).mapv(|v| v * v).sum().sqrt();
        ratios.push(dist / radius);
    }
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let detail = format!(
        "entropy error {worst_entropy:.1e}, gradient relative error {worst_grad:.1e}, min centroid distance / cluster radius {min_ratio:.1} over 5 seeds"
    );
    if min_ratio < 5.0 {
        return Err(detail);
    }
    within_budget(started, Duration::from_secs(120), detail)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(first: &BenchmarkRun) -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = benchmark_config(first.seed, root.path());
    run_pipeline(&config)?;
    let mut compared = 0usize;
    for (a, b) in [(&first.config.data_dir, &config.data_dir), (&first.config.output_dir, &config.output_dir)] {
        let (fa, fb) = (files_under(a), files_under(b));
        if fa != fb {
            return Err(format!("file lists differ under {}", a.display()));
        }
        for rel in &fa {
            if fs::read(a.join(rel)).map_err(|e| e.to_string())? != fs::read(b.join(rel)).map_err(|e| e.to_string())? {
                return Err(format!("{} differs", rel.display()));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across two runs with seed {}", first.seed))
}

fn throughput() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Array2::from_shape_fn((10_000, 30), |_| rng.sample::<f64, _>(StandardNormal));
    let started = Instant::now();
    let model = DeepIsolationForest::fit(x.view(), &DifParams { seed: 1, ..DifParams::default() })
        .map_err(|e| e.to_string())?;
    let scores = model.score_all(x.view()).map_err(|e| e.to_string())?;
    if scores.len() != 10_000 || model.params.total_trees() != 300 {
        return Err("unexpected model shape".into());
    }
    let threads = rayon::current_num_threads();
    within_budget(started, Duration::from_secs(120), format!("DIF 50x6 fit + score on 10000x30 with {threads} thread(s)"))
}

fn report(id: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("[PASS] {id:>2} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("[FAIL] {id:>2} {name}: {detail}");
            false
        }
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut all = true;
    let simple: [Criterion; 5] = [
        (1, "formula exactness", formula_exactness),
        (2, "oracle equivalence", oracle_equivalence),
        (3, "feature formulas", feature_formulas),
        (4, "windowing", windowing),
        (5, "hard-anomaly separation", hard_anomaly_separation),
    ];
    for (id, name, f) in simple {
        if wanted(id) {
            all &= report(id, name, guarded(f));
        }
    }
    let runs = if wanted(6) || wanted(7) || wanted(9) { Some(guarded(benchmark_runs)) } else { None };
    let on_runs = |f: &dyn Fn(&[BenchmarkRun]) -> Outcome| match runs.as_ref().expect("benchmark requested") {
        Ok(runs) => guarded(|| f(runs)),
        Err(e) => Err(format!("benchmark run failed: {e}")),
    };
    if wanted(6) {
        all &= report(6, "top-100 overlap on the driving benchmark", on_runs(&overlap_experiment));
    }
    if wanted(7) {
        all &= report(7, "score distribution shift", on_runs(&distribution_shift));
    }
    if wanted(8) {
        all &= report(8, "t-SNE correctness", guarded(tsne_correctness));
    }
    if wanted(9) {
        all &= report(9, "determinism", on_runs(&|runs| determinism(&runs[0])));
    }
    if wanted(10) {
        all &= report(10, "throughput", guarded(throughput));
    }
    if !all {
        std::process::exit(1);
    }
}
