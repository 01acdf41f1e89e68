//! Cardinality estimation for similarity selection.
//!
//! A query `(x, theta)` is first mapped by feature extraction to a binary
//! code and an integer threshold bin `tau`; a deep regression model then
//! predicts one non-negative count per bin and sums bins `0..=tau`. The
//! prefix-sum structure makes estimates monotone in the threshold for any
//! parameter values.
//!
//! Module map:
//! - [`data`]: records, datasets, workloads, label files
//! - [`features`]: binary codes and threshold maps for four distances
//! - [`oracle`]: exact brute-force selection used for labels and checks
//! - [`nn`]: dense layers, VAE, losses and SGD with explicit backprop
//! - [`model`]: the CardNet estimator and its accelerated variant
//! - [`train`]: loss assembly, dynamic weights, training and updates
//! - [`eval`], [`baselines`], [`planner`], [`synth`], [`container`]

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod bits;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod planner;
pub mod synth;
pub mod train;

pub use bits::Bits;
pub use data::{Dataset, LabeledExample, Record, RecordKind};
pub use error::{Error, Result};
pub use features::{Distance, FeatureConfig};
pub use model::{CardNetModel, Mode};


/// Anything that maps a query record and a threshold to an estimated cardinality.
pub trait CardinalityEstimator {
    fn estimate(&self, query: &Record, theta: f64) -> Result<f64>;

    /// Estimates for one query at several thresholds.
    fn estimate_many(&self, query: &Record, thetas: &[f64]) -> Result<Vec<f64>> {
        thetas.iter().map(|&t| self.estimate(query, t)).collect()
    }
}
