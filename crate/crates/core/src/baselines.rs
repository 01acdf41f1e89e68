//! Reference estimators: uniform sampling and the per-threshold mean.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::oracle::{self, LabeledCurve};
use crate::CardinalityEstimator;

/// Counts matches in a fixed uniform sample and scales by `|D| / |sample|`.
#[derive(Clone, Debug)]
pub struct SamplingEstimator {
    pub sample: Dataset,
    pub population: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl SamplingEstimator {
    pub const DEFAULT_RATIO: f64 = 0.01;

    pub fn new(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::arg(format!("sampling ratio {ratio} must be in (0, 1]")));
        }
        if dataset.is_empty() {
            return Err(Error::arg("cannot sample an empty dataset"));
        }
        let size = ((ratio * dataset.len() as f64).round() as usize).clamp(1, dataset.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = index::sample(&mut rng, dataset.len(), size).into_vec();
        ids.sort_unstable();
        let sample = Dataset::new(dataset.kind, ids.into_iter().map(|i| dataset.records[i].clone()).collect())?;
        Ok(SamplingEstimator {
            sample,
            population: dataset.len(),
            ratio,
            seed,
        })
    }

    fn scale(&self) -> f64 {
        self.population as f64 / self.sample.len() as f64
    }
}

impl CardinalityEstimator for SamplingEstimator {
    fn estimate(&self, query: &Record, theta: f64) -> Result<f64> {
        Ok(oracle::count_within(&self.sample, query, theta)? as f64 * self.scale())
    }

    fn estimate_many(&self, query: &Record, thetas: &[f64]) -> Result<Vec<f64>> {
        let sorted = oracle::sorted_distances(&self.sample, query)?;
        Ok(thetas
            .iter()
            .map(|t| sorted.partition_point(|d| d <= t) as f64 * self.scale())
            .collect())
    }
}

/// Returns the average cardinality of offline queries at the threshold's bin,
/// whatever the query.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanEstimator {
    pub features: FeatureConfig,
    /// Non-decreasing, one entry per bin.
    pub table: Vec<f64>,
}

impl MeanEstimator {
    pub const DEFAULT_QUERIES: usize = 200;

    /// Averages curve prefixes, then applies a running max.
    pub fn from_curves(features: FeatureConfig, curves: &[LabeledCurve]) -> Result<Self> {
        let bins = features.tau_max as usize + 1;
        if curves.is_empty() {
            return Err(Error::arg("mean estimator needs at least one curve"));
        }
        let mut table = vec![0.0; bins];
        for c in curves {
            if c.prefix.len() != bins {
                return Err(Error::arg("curve length does not match tau_max"));
            }
            for (t, p) in table.iter_mut().zip(&c.prefix) {
                *t += *p as f64;
            }
        }
        let n = curves.len() as f64;
        let mut running = 0.0f64;
        for t in &mut table {
            running = running.max(*t / n);
            *t = running;
        }
        Ok(MeanEstimator { features, table })
    }

    /// Builds the table from `queries` records sampled from the dataset.
    pub fn build(dataset: &Dataset, features: FeatureConfig, queries: usize, seed: u64) -> Result<Self> {
        if dataset.is_empty() || queries == 0 {
            return Err(Error::arg("mean estimator needs records and queries"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = index::sample(&mut rng, dataset.len(), queries.min(dataset.len()));
        let curves = ids
            .into_iter()
            .map(|i| oracle::label_curve(dataset, &features, i, &dataset.records[i]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_curves(features, &curves)
    }
}

impl CardinalityEstimator for MeanEstimator {
    fn estimate(&self, _query: &Record, theta: f64) -> Result<f64> {
        Ok(self.table[self.features.map_threshold(theta)? as usize])
    }
}
