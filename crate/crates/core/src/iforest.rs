//! Isolation Forest.
//!
//! Trees are grown on uniform subsamples by recursive axis-parallel splits
//! with the split value drawn strictly inside the node's value range, so no
//! partition is ever empty. Anomaly scores follow `2^(-E[h(x)] / c(psi))`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::stream_rng;

/// Euler-Mascheroni constant as used in the harmonic-number approximation.
pub const EULER_GAMMA: f64 = 0.5772156649;

pub const IFOREST_FORMAT: &str = "raredrive.iforest";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("training data needs at least 2 rows and 1 column, got {rows}x{cols}")]
    EmptyData { rows: usize, cols: usize },
    #[error("all training rows are identical; no split is possible")]
    DegenerateData,
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("contamination must lie in (0, 1), got {0}")]
    InvalidContamination(f64),
    #[error("no scores to threshold")]
    EmptyScores,
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Average path length of an unsuccessful BST search over `m` items.
pub fn c(m: usize) -> f64 {
    match m {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = m as f64;
            2.0 * ((m - 1.0).ln() + EULER_GAMMA) - 2.0 * (m - 1.0) / m
        }
    }
}

/// `2^(-mean_path / c(subsample))`.
pub fn score_from_path_length(mean_path: f64, subsample: usize) -> f64 {
    2f64.powf(-mean_path / c(subsample))
}

/// Tree node. Children are indices into [`IsolationTree::nodes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreeNode {
    Internal { feature: usize, split: f64, left: usize, right: usize },
    External { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    /// Root at index 0.
    pub nodes: Vec<TreeNode>,
    pub height_limit: usize,
    pub subsample_size: usize,
}

impl IsolationTree {
    /// Grow a tree on the rows of `data` listed in `sample`.
    pub fn fit(data: ArrayView2<'_, f64>, sample: &mut [usize], rng: &mut ChaCha8Rng) -> Self {
        let height_limit = height_limit(sample.len());
        let mut tree = Self { nodes: Vec::new(), height_limit, subsample_size: sample.len() };
        tree.grow(data, sample, 0, rng);
        tree
    }

    fn grow(&mut self, data: ArrayView2<'_, f64>, rows: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::External { size: rows.len() });
        if depth >= self.height_limit || rows.len() <= 1 {
            return id;
        }
        // features that still vary inside this node
        let mut candidates: Vec<(usize, f64, f64)> = Vec::new();
        for f in 0..data.ncols() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &r in rows.iter() {
                let v = data[(r, f)];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if lo < hi {
                candidates.push((f, lo, hi));
            }
        }
        if candidates.is_empty() {
            return id;
        }
        let (feature, lo, hi) = candidates[rng.random_range(0..candidates.len())];
        let split = loop {
            let s = rng.random_range(lo..hi);
            if s > lo {
                break s;
            }
        };
        let mut boundary = 0;
        for i in 0..rows.len() {
            if data[(rows[i], feature)] < split {
                rows.swap(i, boundary);
                boundary += 1;
            }
        }
        let (left_rows, right_rows) = rows.split_at_mut(boundary);
        let left = self.grow(data, left_rows, depth + 1, rng);
        let right = self.grow(data, right_rows, depth + 1, rng);
        self.nodes[id] = TreeNode::Internal { feature, split, left, right };
        id
    }

    /// Edges from the root to the leaf reached by `x`, plus `c(size)` of that leaf.
    pub fn path_length(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match self.nodes[node] {
                TreeNode::Internal { feature, split, left, right } => {
                    node = if x[feature] < split { left } else { right };
                    depth += 1;
                }
                TreeNode::External { size } => return depth as f64 + c(size),
            }
        }
    }

    /// Depth of the deepest node.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Internal { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                TreeNode::External { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

/// `ceil(log2(subsample))`.
pub fn height_limit(subsample: usize) -> usize {
    if subsample <= 1 {
        0
    } else {
        (usize::BITS - (subsample - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub subsample_size: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 300, subsample_size: 256, seed: 0 }
    }
}

pub(crate) fn check_training_data(data: ArrayView2<'_, f64>) -> Result<(), ForestError> {
    if data.nrows() < 2 || data.ncols() == 0 {
        return Err(ForestError::EmptyData { rows: data.nrows(), cols: data.ncols() });
    }
    let first = data.row(0);
    if data.outer_iter().all(|r| r == first) {
        return Err(ForestError::DegenerateData);
    }
    Ok(())
}

/// Grow `n_trees` trees on `data`, tree `i` seeded from `(seed, stream, i)`.
pub(crate) fn grow_trees(
    data: ArrayView2<'_, f64>,
    n_trees: usize,
    subsample_size: usize,
    seed: u64,
    stream: &str,
) -> Vec<IsolationTree> {
    let psi = subsample_size.min(data.nrows());
    (0..n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, stream, i as u64);
            let mut sample = rand::seq::index::sample(&mut rng, data.nrows(), psi).into_vec();
            IsolationTree::fit(data, &mut sample, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub format: String,
    pub version: u32,
    pub params: ForestParams,
    pub n_features: usize,
    /// Per-tree training size, `min(psi, n_rows)`.
    pub effective_subsample: usize,
    pub trees: Vec<IsolationTree>,
}

impl IsolationForest {
    pub fn fit(data: ArrayView2<'_, f64>, params: ForestParams) -> Result<Self, ForestError> {
        if params.n_trees == 0 || params.subsample_size < 2 {
            return Err(ForestError::InvalidParameter(
                "need at least one tree and a subsample size of at least 2".into(),
            ));
        }
        check_training_data(data)?;
        let trees = grow_trees(data, params.n_trees, params.subsample_size, params.seed, "itree");
        Ok(Self {
            format: IFOREST_FORMAT.into(),
            version: MODEL_VERSION,
            params,
            n_features: data.ncols(),
            effective_subsample: params.subsample_size.min(data.nrows()),
            trees,
        })
    }

    fn check_dim(&self, got: usize) -> Result<(), ForestError> {
        if got == self.n_features {
            Ok(())
        } else {
            Err(ForestError::DimensionMismatch { expected: self.n_features, got })
        }
    }

    /// Mean path length over all trees.
    pub fn mean_path_length(&self, x: ArrayView1<'_, f64>) -> Result<f64, ForestError> {
        self.check_dim(x.len())?;
        Ok(self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn anomaly_score(&self, x: ArrayView1<'_, f64>) -> Result<f64, ForestError> {
        Ok(score_from_path_length(self.mean_path_length(x)?, self.effective_subsample))
    }

    /// Scores aligned with the rows of `data`.
    pub fn score_all(&self, data: ArrayView2<'_, f64>) -> Result<Vec<f64>, ForestError> {
        if data.nrows() == 0 {
            return Ok(Vec::new());
        }
        self.check_dim(data.ncols())?;
        Ok((0..data.nrows())
            .into_par_iter()
            .map(|i| {
                let row = data.row(i);
                let h = self.trees.iter().map(|t| t.path_length(row)).sum::<f64>() / self.trees.len() as f64;
                score_from_path_length(h, self.effective_subsample)
            })
            .collect())
    }

    pub fn save_json(&self, path: &Path) -> Result<(), ForestError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, ForestError> {
        let model: Self = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| ForestError::Format(e.to_string()))?;
        if model.format != IFOREST_FORMAT || model.version != MODEL_VERSION {
            return Err(ForestError::Format(format!(
                "expected {IFOREST_FORMAT} v{MODEL_VERSION}, found {} v{}",
                model.format, model.version
            )));
        }
        Ok(model)
    }
}

/// Linear-interpolation quantile of sorted values (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Threshold at the `(1 - contamination)` quantile; a row is flagged when its
/// score is strictly above it. With all-equal scores nothing is flagged.
pub fn threshold_by_contamination(scores: &[f64], contamination: f64) -> Result<(f64, Vec<bool>), ForestError> {
    if !(contamination > 0.0 && contamination < 1.0) {
        return Err(ForestError::InvalidContamination(contamination));
    }
    if scores.is_empty() {
        return Err(ForestError::EmptyScores);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = quantile_sorted(&sorted, 1.0 - contamination);
    Ok((threshold, scores.iter().map(|&s| s > threshold).collect()))
}
