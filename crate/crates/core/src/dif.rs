//! Deep Isolation Forest.
//!
//! An ensemble of randomly initialised, never-trained MLPs maps the input
//! rows into `n` representation spaces; each space gets `t` axis-parallel
//! isolation trees. A row's score pools its path lengths over all `n * t`
//! trees into one mean before applying the usual `2^(-E[h]/c(psi))`.
//! By default each representation is standardized on the training rows and
//! squashed with tanh before the trees see it.
//!
//! Networks are fully determined by their seed and architecture, so models
//! serialize the seeds and regenerate weights on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::iforest::{
    check_training_data, grow_trees, score_from_path_length, ForestError, IsolationTree, MODEL_VERSION,
};
use crate::seed::{derive_seed, stream_rng};

pub const DIF_FORMAT: &str = "raredrive.dif";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasInit {
    Zero,
    /// Standard normal, like the weights.
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub bias: BiasInit,
    pub skip_connections: bool,
    pub dropout_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![500, 100],
            output_dim: 20,
            bias: BiasInit::Normal,
            skip_connections: false,
            dropout_rate: 0.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(ForestError::InvalidParameter("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ForestError::InvalidParameter(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Skip {
    Identity,
    Projection(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `in x out`.
    weights: Array2<f64>,
    bias: Array1<f64>,
    tanh: bool,
    /// Fixed inverted-dropout mask (0 or `1/(1-rate)` per unit).
    mask: Option<Array1<f64>>,
    skip: Option<Skip>,
}

/// A frozen random MLP: tanh hidden layers, linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationNetwork {
    pub input_dim: usize,
    pub config: NetworkConfig,
    pub seed: u64,
    layers: Vec<Layer>,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

impl RepresentationNetwork {
    pub fn new(input_dim: usize, config: &NetworkConfig, seed: u64) -> Result<Self, ForestError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(ForestError::InvalidParameter("input dimension must be positive".into()));
        }
        let mut rng = stream_rng(seed, "network-weights", 0);
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        dims.push(config.output_dim);
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = normal_matrix(&mut rng, fan_in, fan_out);
            let bias = match config.bias {
                BiasInit::Zero => Array1::zeros(fan_out),
                BiasInit::Normal => Array1::from_shape_simple_fn(fan_out, || rng.sample(StandardNormal)),
            };
            let hidden = i + 1 < n_layers;
            let mask = (hidden && config.dropout_rate > 0.0).then(|| {
                let keep = 1.0 - config.dropout_rate;
                Array1::from_shape_simple_fn(fan_out, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            });
            let skip = config.skip_connections.then(|| {
                if fan_in == fan_out {
                    Skip::Identity
                } else {
                    Skip::Projection(normal_matrix(&mut rng, fan_in, fan_out) / (fan_in as f64).sqrt())
                }
            });
            layers.push(Layer { weights, bias, tanh: hidden, mask, skip });
        }
        Ok(Self { input_dim, config: config.clone(), seed, layers })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn forward(&self, batch: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = batch.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weights) + &layer.bias;
            if layer.tanh {
                z.mapv_inplace(f64::tanh);
            }
            if let Some(mask) = &layer.mask {
                z *= mask;
            }
            match &layer.skip {
                Some(Skip::Identity) => z += &h,
                Some(Skip::Projection(p)) => z += &h.dot(p),
                None => {}
            }
            h = z;
        }
        h
    }

    /// Map rows to the representation space, `batch_size` rows at a time.
    pub fn project(&self, rows: ArrayView2<'_, f64>, batch_size: usize) -> Result<Array2<f64>, ForestError> {
        if rows.ncols() != self.input_dim {
            return Err(ForestError::DimensionMismatch { expected: self.input_dim, got: rows.ncols() });
        }
        let mut out = Array2::zeros((rows.nrows(), self.output_dim()));
        for (src, mut dst) in rows
            .axis_chunks_iter(Axis(0), batch_size.max(1))
            .zip(out.axis_chunks_iter_mut(Axis(0), batch_size.max(1)))
        {
            dst.assign(&self.forward(src));
        }
        Ok(out)
    }
}

/// Post-processing applied to network outputs before tree growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputScaling {
    None,
    /// Per-dimension standardization fitted on the training rows, then tanh.
    StandardizeTanh,
}

/// Per-dimension statistics of one network's training outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl OutputStats {
    /// Population statistics; constant dimensions get stddev 1.
    pub fn fit(z: ArrayView2<'_, f64>) -> Self {
        let n = z.nrows() as f64;
        let mean: Vec<f64> = z.columns().into_iter().map(|c| c.sum() / n).collect();
        let stddev = z
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Self { mean, stddev }
    }

    pub fn apply(&self, z: &mut Array2<f64>) {
        for mut row in z.outer_iter_mut() {
            for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.stddev) {
                *v = ((*v - m) / sd).tanh();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifParams {
    pub n_representations: usize,
    pub trees_per_representation: usize,
    pub subsample_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    pub output_scaling: OutputScaling,
}

impl Default for DifParams {
    fn default() -> Self {
        Self {
            n_representations: 50,
            trees_per_representation: 6,
            subsample_size: 256,
            batch_size: 64,
            seed: 0,
            network: NetworkConfig::default(),
            output_scaling: OutputScaling::StandardizeTanh,
        }
    }
}

impl DifParams {
    pub fn total_trees(&self) -> usize {
        self.n_representations * self.trees_per_representation
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepIsolationForest {
    pub format: String,
    pub version: u32,
    pub params: DifParams,
    pub n_features: usize,
    pub effective_subsample: usize,
    pub network_seeds: Vec<u64>,
    /// Present when `params.output_scaling` is `StandardizeTanh`, one per network.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub output_stats: Vec<OutputStats>,
    /// One forest of `trees_per_representation` trees per network.
    pub forests: Vec<Vec<IsolationTree>>,
    #[serde(skip)]
    networks: Vec<RepresentationNetwork>,
}

impl PartialEq for DeepIsolationForest {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.n_features == other.n_features
            && self.network_seeds == other.network_seeds
            && self.output_stats == other.output_stats
            && self.forests == other.forests
    }
}

impl DeepIsolationForest {
    pub fn fit(data: ArrayView2<'_, f64>, params: &DifParams) -> Result<Self, ForestError> {
        if params.n_representations == 0 || params.trees_per_representation == 0 || params.subsample_size < 2 {
            return Err(ForestError::InvalidParameter(
                "need at least one representation, one tree each and a subsample size of at least 2".into(),
            ));
        }
        params.network.validate()?;
        check_training_data(data)?;
        let network_seeds: Vec<u64> =
            (0..params.n_representations).map(|u| derive_seed(params.seed, "network", u as u64)).collect();
        let fitted: Vec<(RepresentationNetwork, Option<OutputStats>, Vec<IsolationTree>)> = network_seeds
            .par_iter()
            .enumerate()
            .map(|(u, &seed)| {
                let net = RepresentationNetwork::new(data.ncols(), &params.network, seed)?;
                let mut projected = net.project(data, params.batch_size)?;
                let stats = match params.output_scaling {
                    OutputScaling::None => None,
                    OutputScaling::StandardizeTanh => {
                        let stats = OutputStats::fit(projected.view());
                        stats.apply(&mut projected);
                        Some(stats)
                    }
                };
                let tree_seed = derive_seed(params.seed, "dif-trees", u as u64);
                let trees = grow_trees(
                    projected.view(),
                    params.trees_per_representation,
                    params.subsample_size,
                    tree_seed,
                    "itree",
                );
                Ok((net, stats, trees))
            })
            .collect::<Result<_, ForestError>>()?;
        let mut networks = Vec::with_capacity(fitted.len());
        let mut output_stats = Vec::new();
        let mut forests = Vec::with_capacity(fitted.len());
        for (net, stats, trees) in fitted {
            networks.push(net);
            output_stats.extend(stats);
            forests.push(trees);
        }
        Ok(Self {
            format: DIF_FORMAT.into(),
            version: MODEL_VERSION,
            params: params.clone(),
            n_features: data.ncols(),
            effective_subsample: params.subsample_size.min(data.nrows()),
            network_seeds,
            output_stats,
            forests,
            networks,
        })
    }

    /// Representation `u` of `rows`, including output scaling.
    pub fn represent(&self, u: usize, rows: ArrayView2<'_, f64>) -> Result<Array2<f64>, ForestError> {
        let mut z = self.networks[u].project(rows, self.params.batch_size)?;
        if let Some(stats) = self.output_stats.get(u) {
            stats.apply(&mut z);
        }
        Ok(z)
    }

    pub fn networks(&self) -> &[RepresentationNetwork] {
        &self.networks
    }

    fn check_dim(&self, got: usize) -> Result<(), ForestError> {
        if got == self.n_features {
            Ok(())
        } else {
            Err(ForestError::DimensionMismatch { expected: self.n_features, got })
        }
    }

    /// Path lengths of `x`, grouped per representation.
    pub fn path_lengths(&self, x: ArrayView1<'_, f64>) -> Result<Vec<Vec<f64>>, ForestError> {
        self.check_dim(x.len())?;
        let row = x.insert_axis(Axis(0));
        self.forests
            .iter()
            .enumerate()
            .map(|(u, trees)| {
                let z = self.represent(u, row)?;
                Ok(trees.iter().map(|t| t.path_length(z.row(0))).collect())
            })
            .collect()
    }

    pub fn anomaly_score(&self, x: ArrayView1<'_, f64>) -> Result<f64, ForestError> {
        let pooled: Vec<f64> = self.path_lengths(x)?.into_iter().flatten().collect();
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        Ok(score_from_path_length(mean, self.effective_subsample))
    }

    /// Scores aligned with the rows of `data`.
    pub fn score_all(&self, data: ArrayView2<'_, f64>) -> Result<Vec<f64>, ForestError> {
        if data.nrows() == 0 {
            return Ok(Vec::new());
        }
        self.check_dim(data.ncols())?;
        let per_rep: Vec<Vec<f64>> = self
            .forests
            .par_iter()
            .enumerate()
            .map(|(u, trees)| {
                let z = self.represent(u, data)?;
                Ok(z.outer_iter().map(|r| trees.iter().map(|t| t.path_length(r)).sum::<f64>()).collect())
            })
            .collect::<Result<_, ForestError>>()?;
        let total_trees: usize = self.forests.iter().map(Vec::len).sum();
        let mut sums = vec![0.0; data.nrows()];
        for rep in &per_rep {
            sums.iter_mut().zip(rep).for_each(|(s, v)| *s += v);
        }
        Ok(sums
            .into_iter()
            .map(|s| score_from_path_length(s / total_trees as f64, self.effective_subsample))
            .collect())
    }

    pub fn save_json(&self, path: &Path) -> Result<(), ForestError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Load a model and regenerate its networks from the stored seeds.
    pub fn load_json(path: &Path) -> Result<Self, ForestError> {
        let mut model: Self = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| ForestError::Format(e.to_string()))?;
        if model.format != DIF_FORMAT || model.version != MODEL_VERSION {
            return Err(ForestError::Format(format!(
                "expected {DIF_FORMAT} v{MODEL_VERSION}, found {} v{}",
                model.format, model.version
            )));
        }
        if model.forests.len() != model.network_seeds.len() {
            return Err(ForestError::Format("forest and network counts differ".into()));
        }
        let expected_stats = match model.params.output_scaling {
            OutputScaling::None => 0,
            OutputScaling::StandardizeTanh => model.network_seeds.len(),
        };
        if model.output_stats.len() != expected_stats {
            return Err(ForestError::Format("output statistics do not match the scaling mode".into()));
        }
        model.networks = model
            .network_seeds
            .iter()
            .map(|&s| RepresentationNetwork::new(model.n_features, &model.params.network, s))
            .collect::<Result<_, _>>()?;
        Ok(model)
    }
}
