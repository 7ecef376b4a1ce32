//! Exact t-SNE for 2-D views of the feature table.
//!
//! O(n²) in time and memory per iteration, which is fine for a few thousand
//! rows and keeps the gradient simple enough to check against finite
//! differences.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::WindowRef;
use crate::ingest::csv_io;
use crate::seed::stream_rng;

/// Entropy tolerance of the per-point bandwidth search (nats).
pub const ENTROPY_TOLERANCE: f64 = 1e-10;
const MAX_SEARCH_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;
const INIT_STD: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TsneError {
    #[error("{n} points are too few for perplexity {perplexity}: need at least {needed}")]
    TooFewPoints { n: usize, perplexity: f64, needed: usize },
    #[error("input contains a non-finite distance")]
    NonFiniteDistance,
    #[error("KL divergence became non-finite at iteration {0}")]
    DivergenceDetected(usize),
    #[error("invalid t-SNE config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {0} rows vs {1} flags")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches to `final_momentum`.
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<(), TsneError> {
        let bad = |m: &str| Err(TsneError::InvalidConfig(m.into()));
        if !(self.perplexity.is_finite() && self.perplexity > 0.0) {
            return bad("perplexity must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.early_exaggeration.is_finite() && self.early_exaggeration >= 1.0) {
            return bad("early exaggeration must be at least 1");
        }
        if !(0.0..1.0).contains(&self.initial_momentum) || !(0.0..1.0).contains(&self.final_momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Smallest row count that supports `perplexity`.
pub fn min_points(perplexity: f64) -> usize {
    (3.0 * perplexity).floor() as usize + 1
}

fn squared_distances(rows: ArrayView2<'_, f64>) -> Result<Array2<f64>, TsneError> {
    let n = rows.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    d.as_slice_mut().expect("standard layout").par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let a = rows.row(i);
        for j in 0..n {
            out[j] = a.iter().zip(rows.row(j).iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    });
    if d.iter().all(|v| v.is_finite()) {
        Ok(d)
    } else {
        Err(TsneError::NonFiniteDistance)
    }
}

/// Conditional distribution of row `i` at precision `beta`, and its entropy in nats.
/// Distances are shifted by their minimum, which leaves the distribution unchanged
/// and keeps the exponentials from underflowing.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let d_min = dist.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, p)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *p = 0.0;
            continue;
        }
        let shifted = d - d_min;
        *p = (-shifted * beta).exp();
        sum += *p;
        weighted += shifted * *p;
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Row-conditional affinities `P(j|i)` whose entropies match `ln(perplexity)`.
pub fn conditional_affinities(rows: ArrayView2<'_, f64>, perplexity: f64) -> Result<Array2<f64>, TsneError> {
    let n = rows.nrows();
    let needed = min_points(perplexity);
    if n < needed {
        return Err(TsneError::TooFewPoints { n, perplexity, needed });
    }
    let dist = squared_distances(rows)?;
    let target = perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    p.as_slice_mut().expect("standard layout").par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let d = dist.row(i).to_vec();
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..MAX_SEARCH_STEPS {
            let h = conditional_row(&d, i, beta, out);
            let diff = h - target;
            if diff.abs() < ENTROPY_TOLERANCE {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        conditional_row(&d, i, beta, out);
    });
    Ok(p)
}

/// Symmetrized joint affinities `(P(j|i) + P(i|j)) / 2n`.
pub fn pairwise_affinities(rows: ArrayView2<'_, f64>, perplexity: f64) -> Result<Array2<f64>, TsneError> {
    let cond = conditional_affinities(rows, perplexity)?;
    let n = cond.nrows() as f64;
    Ok((&cond + &cond.t()) / (2.0 * n))
}

/// Student-t kernel values and their sum over `i != j`.
fn kernel(y: ArrayView2<'_, f64>) -> (Array2<f64>, f64) {
    let n = y.nrows();
    let mut num = Array2::<f64>::zeros((n, n));
    num.as_slice_mut().expect("standard layout").par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        for j in 0..n {
            if j != i {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                out[j] = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let sum = num.sum();
    (num, sum)
}

/// `KL(P || Q)` for the embedding `y`.
pub fn kl_divergence(p: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    let (num, sum) = kernel(y);
    kl_from_kernel(p, &num, sum)
}

fn kl_from_kernel(p: ArrayView2<'_, f64>, num: &Array2<f64>, sum: f64) -> f64 {
    p.iter()
        .zip(num.iter())
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / sum)).ln())
        .sum()
}

/// Gradient of `KL(exaggeration * P || Q)` with respect to `y`:
/// `4 Σ_j (e·p_ij − q_ij)(y_i − y_j) / (1 + |y_i − y_j|²)`.
pub fn kl_gradient(p: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, exaggeration: f64) -> Array2<f64> {
    let (num, sum) = kernel(y);
    gradient_from_kernel(p, y, &num, sum, exaggeration)
}

fn gradient_from_kernel(
    p: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    num: &Array2<f64>,
    sum: f64,
    exaggeration: f64,
) -> Array2<f64> {
    let n = y.nrows();
    let mut grad = Array2::<f64>::zeros((n, 2));
    grad.as_slice_mut().expect("standard layout").par_chunks_mut(2).enumerate().for_each(|(i, g)| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = (exaggeration * p[[i, j]] - num[[i, j]] / sum) * num[[i, j]];
            gx += w * (y[[i, 0]] - y[[j, 0]]);
            gy += w * (y[[i, 1]] - y[[j, 1]]);
        }
        g[0] = 4.0 * gx;
        g[1] = 4.0 * gy;
    });
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// `n × 2`, aligned with the input rows.
    pub coords: Array2<f64>,
    pub final_kl: f64,
    /// KL divergence (against the unexaggerated P) before each update.
    pub kl_history: Vec<f64>,
}

/// Gradient descent on `KL(P || Q)` with momentum, adaptive gains and early
/// exaggeration. Coordinates are re-centred after every step.
pub fn embed(rows: ArrayView2<'_, f64>, config: &TsneConfig) -> Result<Embedding, TsneError> {
    config.validate()?;
    let p = pairwise_affinities(rows, config.perplexity)?;
    let n = rows.nrows();
    let mut rng = stream_rng(config.seed, "tsne-init", 0);
    let init = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut y = Array2::from_shape_fn((n, 2), |_| init.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut kl_history = Vec::with_capacity(config.n_iterations);

    for it in 0..config.n_iterations {
        let exaggeration = if it < config.exaggeration_iterations { config.early_exaggeration } else { 1.0 };
        let momentum = if it < config.momentum_switch { config.initial_momentum } else { config.final_momentum };
        let (num, sum) = kernel(y.view());
        let kl = kl_from_kernel(p.view(), &num, sum);
        if !kl.is_finite() {
            return Err(TsneError::DivergenceDetected(it));
        }
        kl_history.push(kl);
        let grad = gradient_from_kernel(p.view(), y.view(), &num, sum, exaggeration);
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
            *gain = gain.max(MIN_GAIN);
            *u = momentum * *u - config.learning_rate * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("non-empty");
        y -= &mean;
    }
    let final_kl = kl_divergence(p.view(), y.view());
    if !final_kl.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(TsneError::DivergenceDetected(config.n_iterations));
    }
    Ok(Embedding { coords: y, final_kl, kl_history })
}

/// CSV with columns `x, y, flag, window_ref`; `flag` is 0 or 1.
pub fn export_embedding(
    embedding: &Embedding,
    flags: &[bool],
    windows: &[WindowRef],
    path: &Path,
) -> Result<(), TsneError> {
    let n = embedding.coords.nrows();
    if flags.len() != n {
        return Err(TsneError::LengthMismatch(n, flags.len()));
    }
    if windows.len() != n {
        return Err(TsneError::LengthMismatch(n, windows.len()));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["x", "y", "flag", "window_ref"]).map_err(csv_io)?;
    for ((row, &flag), win) in embedding.coords.rows().into_iter().zip(flags).zip(windows) {
        w.write_record([format!("{}", row[0]), format!("{}", row[1]), u8::from(flag).to_string(), win.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: TsneConfig,
    pub n_points: usize,
    pub iterations: usize,
    pub final_kl: f64,
}

pub fn write_run_report(report: &RunReport, path: &Path) -> Result<(), TsneError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
