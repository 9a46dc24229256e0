//! Probabilistic gradient boosting.
//!
//! A single histogram tree ensemble is trained on a point loss. Every leaf
//! additionally stores an approximate variance of its weight, derived from
//! the sample statistics of the gradients and hessians that reached it.
//! At prediction time the per-tree means and variances are accumulated into
//! a predictive mean and variance per row, which can then be sampled from any
//! of several output distributions by moment matching.
//!
//! Modules, bottom up:
//!
//! - [`data`]: CSV ingestion and equal-density binning
//! - [`loss`]: gradient/hessian providers (squared error, hierarchical
//!   weighted squared error, finite differences)
//! - [`tree`]: histogram split search and stochastic leaf weights
//! - [`boost`]: training loop and moment prediction
//! - [`dist`]: moment-matched output distributions
//! - [`metrics`]: CRPS and RMSE, optionally per hierarchy level
//! - [`model_io`]: text model persistence
//! - [`cli`]: the `pgbm` command-line frontend

pub mod boost;
pub mod cli;
pub mod data;
pub mod dist;
pub mod loss;
pub mod metrics;
pub mod model_io;
pub mod tree;

pub use boost::{predict_moments, train, BoostConfig, Ensemble, PredictiveMoments, Rho};
pub use data::{load_csv, BinEdges, BinnedDataset, FeatureMatrix, RawDataset};
pub use dist::{DistSpec, Family, SampleMatrix};
pub use loss::{GradHess, GradHessProvider, HierWmse, HierarchySpec, Mse};
pub use tree::{LeafStats, Tree, TreeConfig};
