//! Training loop and moment prediction.
//!
//! Training fits one tree per iteration to the gradients and hessians of the
//! loss at the current mean estimate and moves every sample's mean by
//! `-alpha * leaf.mu`. Prediction replays the trees and additionally
//! accumulates the variance
//! `var_k = var_{k-1} + alpha^2 leaf.var - 2 alpha rho sd_{k-1} leaf.sd`,
//! where `rho` is a single constant correlation between consecutive trees.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{apply_bins, bin_features, compute_bin_edges, BinEdges, BinIndex, DataError, FeatureMatrix, RawDataset};
use crate::loss::{GradHessProvider, LossError};
use crate::metrics::{crps_normal, rmse};
use crate::tree::{self, LeafStats, Tree, TreeConfig, TreeError};

#[derive(Debug, Error)]
pub enum BoostError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid boosting config: {0}")]
    InvalidConfig(String),
    #[error("non-finite estimate at iteration {iteration}, sample {sample}")]
    NonFiniteEstimate { iteration: usize, sample: usize },
    #[error("early stopping requires a validation set")]
    MissingValidation,
}

/// Correlation between consecutive trees' leaf weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    /// `log10(n_train) / 100`, resolved at training time.
    Auto,
    Fixed(f64),
}

impl Rho {
    pub fn resolve(self, n_train: usize) -> f64 {
        match self {
            Rho::Auto => default_rho(n_train),
            Rho::Fixed(r) => r,
        }
    }
}

impl std::str::FromStr for Rho {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "auto" {
            return Ok(Rho::Auto);
        }
        let r: f64 = s.trim().parse().map_err(|_| format!("invalid rho `{s}`"))?;
        if !(-1.0..=1.0).contains(&r) {
            return Err(format!("rho {r} outside [-1, 1]"));
        }
        Ok(Rho::Fixed(r))
    }
}

impl std::fmt::Display for Rho {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rho::Auto => f.write_str("auto"),
            Rho::Fixed(r) => write!(f, "{r:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMetric {
    Rmse,
    /// CRPS of a Normal with the predicted moments (closed form).
    Crps,
}

impl std::str::FromStr for ValidationMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "rmse" => Ok(Self::Rmse),
            "crps" => Ok(Self::Crps),
            other => Err(format!("unknown validation metric `{other}`")),
        }
    }
}

impl std::fmt::Display for ValidationMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rmse => "rmse",
            Self::Crps => "crps",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub bagging_fraction: f64,
    /// Tree settings; `tree.seed` is overridden per iteration from `seed`.
    pub tree: TreeConfig,
    pub rho: Rho,
    pub early_stopping_rounds: Option<usize>,
    pub early_stopping_metric: ValidationMetric,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            learning_rate: 0.1,
            bagging_fraction: 1.0,
            tree: TreeConfig::default(),
            rho: Rho::Auto,
            early_stopping_rounds: None,
            early_stopping_metric: ValidationMetric::Rmse,
            seed: 1,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<(), BoostError> {
        let bad = |m: &str| Err(BoostError::InvalidConfig(m.to_string()));
        if self.n_estimators < 1 {
            return bad("n_estimators must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.bagging_fraction > 0.0 && self.bagging_fraction <= 1.0) {
            return bad("bagging_fraction must be in (0, 1]");
        }
        if let Rho::Fixed(r) = self.rho {
            if !(-1.0..=1.0).contains(&r) {
                return bad("rho must be in [-1, 1]");
            }
        }
        if self.early_stopping_rounds == Some(0) {
            return bad("early_stopping_rounds must be >= 1");
        }
        self.tree.validate()?;
        Ok(())
    }
}

/// Trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub trees: Vec<Tree>,
    pub y0: f64,
    pub alpha: f64,
    /// Resolved tree correlation used by default at prediction time.
    pub rho: f64,
    pub edges: BinEdges,
    pub config: BoostConfig,
    pub n_train: usize,
}

/// Per-sample predictive mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMoments {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl PredictiveMoments {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

pub fn default_rho(n_train: usize) -> f64 {
    (n_train.max(1) as f64).log10() / 100.0
}

/// One step of the mean/variance recursion. The variance is clamped at 0.
#[inline]
pub fn update_moments(mu_prev: f64, var_prev: f64, alpha: f64, rho: f64, leaf: &LeafStats) -> (f64, f64) {
    let mu = mu_prev - alpha * leaf.mu;
    let var = var_prev + alpha * alpha * leaf.var - 2.0 * alpha * rho * var_prev.sqrt() * leaf.var.sqrt();
    (mu, var.max(0.0))
}

/// Validation data and the metric used for early stopping.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub data: &'a RawDataset,
    pub metric: ValidationMetric,
}

/// Summary of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Validation metric after each iteration, if validating.
    pub valid_history: Vec<f64>,
    /// Number of trees kept.
    pub best_iteration: usize,
}

pub fn train(
    data: &RawDataset,
    loss: &dyn GradHessProvider,
    config: &BoostConfig,
    valid: Option<Validation<'_>>,
) -> Result<Ensemble, BoostError> {
    train_with_report(data, loss, config, valid, |_, _| {}).map(|(m, _)| m)
}

fn iteration_seed(seed: u64, k: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sorted bagging subset of `ceil(fraction * n)` rows for iteration `k`.
pub fn bagging_subset(n: usize, fraction: f64, seed: u64, k: usize) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n).collect();
    }
    let m = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut idx = sample_indices(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

/// Trains and calls `on_iteration(k, metric)` after every validated iteration.
pub fn train_with_report(
    data: &RawDataset,
    loss: &dyn GradHessProvider,
    config: &BoostConfig,
    valid: Option<Validation<'_>>,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<(Ensemble, TrainReport), BoostError> {
    config.validate()?;
    if config.early_stopping_rounds.is_some() && valid.is_none() {
        return Err(BoostError::MissingValidation);
    }
    let n = data.n_samples();
    let edges = compute_bin_edges(data, config.tree.max_bins)?;
    let binned = apply_bins(data, &edges)?;
    let y = &data.target;
    let y0 = y.iter().sum::<f64>() / n as f64;
    let alpha = config.learning_rate;
    let rho = config.rho.resolve(n);

    let mut mu = vec![y0; n];
    let mut var = vec![0.0; n];

    let valid_bins = match valid {
        Some(v) => Some(bin_features(&v.data.features, &edges)?),
        None => None,
    };
    let n_valid = valid.map_or(0, |v| v.data.n_samples());
    let mut vmu = vec![y0; n_valid];
    let mut vvar = vec![0.0; n_valid];

    let mut trees = Vec::with_capacity(config.n_estimators);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize);

    for k in 0..config.n_estimators {
        let gh = loss.gradhess(y, &mu)?;
        let mask = bagging_subset(n, config.bagging_fraction, config.seed, k);
        let tree_cfg = TreeConfig {
            seed: iteration_seed(config.seed, k),
            ..config.tree.clone()
        };
        let tree = tree::grow_tree(&binned, &gh, &mask, &tree_cfg)?;

        mu.par_iter_mut()
            .zip(var.par_iter_mut())
            .enumerate()
            .for_each(|(i, (m, v))| {
                let leaf = &tree.leaves()[tree.route_row(&binned, i)];
                (*m, *v) = update_moments(*m, *v, alpha, rho, leaf);
            });
        if let Some(sample) = mu.iter().position(|m| !m.is_finite()) {
            return Err(BoostError::NonFiniteEstimate { iteration: k, sample });
        }

        if let (Some(v), Some(vb)) = (valid, &valid_bins) {
            vmu.par_iter_mut()
                .zip(vvar.par_iter_mut())
                .enumerate()
                .for_each(|(i, (m, s))| {
                    let leaf = &tree.leaves()[tree.route(|j| vb[j][i])];
                    (*m, *s) = update_moments(*m, *s, alpha, rho, leaf);
                });
            let score = match v.metric {
                ValidationMetric::Rmse => rmse(&v.data.target, &vmu).expect("validation lengths match"),
                ValidationMetric::Crps => {
                    let total: f64 = (0..n_valid)
                        .map(|i| crps_normal(vmu[i], vvar[i].sqrt(), v.data.target[i]))
                        .sum();
                    total / n_valid as f64
                }
            };
            history.push(score);
            on_iteration(k + 1, score);
            if score < best.0 {
                best = (score, k + 1);
            }
        }
        trees.push(tree);

        if let Some(rounds) = config.early_stopping_rounds {
            if k + 1 - best.1 >= rounds {
                break;
            }
        }
    }

    let best_iteration = if valid.is_some() && config.early_stopping_rounds.is_some() {
        trees.truncate(best.1);
        best.1
    } else {
        trees.len()
    };

    let model = Ensemble {
        trees,
        y0,
        alpha,
        rho,
        edges,
        config: config.clone(),
        n_train: n,
    };
    Ok((
        model,
        TrainReport {
            valid_history: history,
            best_iteration,
        },
    ))
}

/// Leaf reached by every row in every tree, `[row][tree]`.
///
/// Routing once lets several correlation values be evaluated without
/// re-descending the trees.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafPaths {
    leaves: Vec<Vec<u32>>,
}

impl Ensemble {
    pub fn n_features(&self) -> usize {
        self.edges.n_features()
    }

    fn check_features(&self, x: &FeatureMatrix) -> Result<Vec<Vec<BinIndex>>, BoostError> {
        if x.n_features() != self.n_features() {
            return Err(DataError::FeatureCountMismatch {
                expected: self.n_features(),
                found: x.n_features(),
            }
            .into());
        }
        Ok(bin_features(x, &self.edges)?)
    }

    pub fn route_all(&self, x: &FeatureMatrix) -> Result<LeafPaths, BoostError> {
        let bins = self.check_features(x)?;
        let leaves = (0..x.n_samples())
            .into_par_iter()
            .map(|i| self.trees.iter().map(|t| t.route(|j| bins[j][i]) as u32).collect())
            .collect();
        Ok(LeafPaths { leaves })
    }

    /// Replays the moment recursion along precomputed paths.
    pub fn accumulate(&self, paths: &LeafPaths, rho: f64) -> PredictiveMoments {
        let (mu, var) = paths
            .leaves
            .par_iter()
            .map(|path| {
                let (mut m, mut v) = (self.y0, 0.0);
                for (tree, &leaf) in self.trees.iter().zip(path) {
                    (m, v) = update_moments(m, v, self.alpha, rho, &tree.leaves()[leaf as usize]);
                }
                (m, v)
            })
            .unzip();
        PredictiveMoments { mu, var }
    }

    pub fn predict_moments_with_rho(&self, x: &FeatureMatrix, rho: f64) -> Result<PredictiveMoments, BoostError> {
        Ok(self.accumulate(&self.route_all(x)?, rho))
    }
}

/// Mean and variance for every row using the model's stored correlation.
pub fn predict_moments(model: &Ensemble, x: &FeatureMatrix) -> Result<PredictiveMoments, BoostError> {
    model.predict_moments_with_rho(x, model.rho)
}
