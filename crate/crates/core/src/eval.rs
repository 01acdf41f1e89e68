//! Accuracy metrics and the degree-of-monotonicity test.

use std::fmt::Write as _;

use crate::data::Record;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::nn;
use crate::CardinalityEstimator;

fn check_lengths(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::shape(format!(
            "{} truths against {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::arg("metric over an empty set"));
    }
    Ok(())
}

pub fn mse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_lengths(truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(c, p)| (c - p).powi(2)).sum::<f64>() / truth.len() as f64)
}

/// Mean of `|c - c_hat| / c`. A zero truth is an error.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_lengths(truth, pred)?;
    if truth.contains(&0.0) {
        return Err(Error::arg("MAPE is undefined for a zero true cardinality"));
    }
    Ok(truth.iter().zip(pred).map(|(c, p)| (c - p).abs() / c).sum::<f64>() / truth.len() as f64)
}

pub fn msle(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_lengths(truth, pred)?;
    nn::msle(pred, truth)
}

/// One evaluated query threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub query_id: usize,
    pub record: Record,
    pub theta: f64,
    pub cardinality: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketStats {
    pub theta: f64,
    pub count: usize,
    pub mse: f64,
    pub mape: f64,
    pub msle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub mse: f64,
    pub mape: f64,
    pub msle: f64,
    /// Per distinct threshold, ascending.
    pub per_threshold: Vec<BucketStats>,
}

fn stats(truth: &[f64], pred: &[f64]) -> Result<(f64, f64, f64)> {
    Ok((mse(truth, pred)?, mape(truth, pred)?, msle(truth, pred)?))
}

impl EvalReport {
    pub fn from_predictions(thetas: &[f64], truth: &[f64], pred: &[f64]) -> Result<Self> {
        check_lengths(truth, pred)?;
        if thetas.len() != truth.len() {
            return Err(Error::shape("one threshold per prediction required"));
        }
        let (mse, mape, msle) = stats(truth, pred)?;
        let mut keys: Vec<f64> = thetas.to_vec();
        keys.sort_by(f64::total_cmp);
        keys.dedup();
        let per_threshold = keys
            .into_iter()
            .map(|t| {
                let idx: Vec<usize> = (0..thetas.len()).filter(|&i| thetas[i] == t).collect();
                let tr: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
                let pr: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
                let (mse, mape, msle) = stats(&tr, &pr)?;
                Ok(BucketStats {
                    theta: t,
                    count: idx.len(),
                    mse,
                    mape,
                    msle,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            n: truth.len(),
            mse,
            mape,
            msle,
            per_threshold,
        })
    }

    /// Count-weighted mean of the per-threshold MSE values.
    pub fn recomposed_mse(&self) -> f64 {
        self.per_threshold.iter().map(|b| b.mse * b.count as f64).sum::<f64>() / self.n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("theta,count,mse,mape,msle\n");
        writeln!(s, "all,{},{},{},{}", self.n, self.mse, self.mape, self.msle).unwrap();
        for b in &self.per_threshold {
            writeln!(s, "{:?},{},{},{},{}", b.theta, b.count, b.mse, b.mape, b.msle).unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>10} {:>7} {:>14} {:>10} {:>10}", "theta", "n", "MSE", "MAPE", "MSLE").unwrap();
        writeln!(s, "{:>10} {:>7} {:>14.4} {:>10.4} {:>10.4}", "all", self.n, self.mse, self.mape, self.msle).unwrap();
        for b in &self.per_threshold {
            writeln!(
                s,
                "{:>10.4} {:>7} {:>14.4} {:>10.4} {:>10.4}",
                b.theta, b.count, b.mse, b.mape, b.msle
            )
            .unwrap();
        }
        s
    }
}

/// Estimates grouped by query so estimators can share work across thresholds.
fn predictions(est: &dyn CardinalityEstimator, cases: &[EvalCase]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; cases.len()];
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by_key(|&i| cases[i].query_id);
    let mut start = 0;
    while start < order.len() {
        let qid = cases[order[start]].query_id;
        let mut end = start;
        while end < order.len() && cases[order[end]].query_id == qid {
            end += 1;
        }
        let idx = &order[start..end];
        let thetas: Vec<f64> = idx.iter().map(|&i| cases[i].theta).collect();
        let est_q = est.estimate_many(&cases[idx[0]].record, &thetas)?;
        for (&i, v) in idx.iter().zip(est_q) {
            out[i] = v;
        }
        start = end;
    }
    Ok(out)
}

pub fn evaluate(est: &dyn CardinalityEstimator, cases: &[EvalCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::arg("empty test set"));
    }
    let pred = predictions(est, cases)?;
    let truth: Vec<f64> = cases.iter().map(|c| c.cardinality as f64).collect();
    let thetas: Vec<f64> = cases.iter().map(|c| c.theta).collect();
    EvalReport::from_predictions(&thetas, &truth, &pred)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicityReport {
    /// Percentage in `[0, 100]`.
    pub dgrmon: f64,
    pub monotonic_pairs: usize,
    pub comparable_pairs: usize,
}

/// Adjacent-threshold pairs `(theta, theta_next)` per query, counted
/// monotonic when the estimate does not decrease.
pub fn dgrmon(est: &dyn CardinalityEstimator, queries: &[Record], grid: &[f64]) -> Result<MonotonicityReport> {
    if queries.is_empty() {
        return Err(Error::arg("monotonicity test needs at least one query"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() < 2 {
        return Err(Error::arg("monotonicity test needs at least two thresholds"));
    }
    let mut mono = 0;
    let mut pairs = 0;
    for q in queries {
        let values = grid.iter().map(|&t| est.estimate(q, t)).collect::<Result<Vec<_>>>()?;
        for w in values.windows(2) {
            pairs += 1;
            if w[0] <= w[1] {
                mono += 1;
            }
        }
    }
    Ok(MonotonicityReport {
        dgrmon: 100.0 * mono as f64 / pairs as f64,
        monotonic_pairs: mono,
        comparable_pairs: pairs,
    })
}

/// Every integer threshold for integer distances, else 41 uniform points.
pub fn theta_grid(cfg: &FeatureConfig) -> Vec<f64> {
    cfg.label_thresholds(DEFAULT_GRID_POINTS)
}

pub const DEFAULT_GRID_POINTS: usize = 41;

/// Exact cardinalities, usable wherever an estimator is expected.
pub struct OracleEstimator<'a> {
    pub dataset: &'a crate::data::Dataset,
}

impl CardinalityEstimator for OracleEstimator<'_> {
    fn estimate(&self, query: &Record, theta: f64) -> Result<f64> {
        Ok(crate::oracle::count_within(self.dataset, query, theta)? as f64)
    }

    fn estimate_many(&self, query: &Record, thetas: &[f64]) -> Result<Vec<f64>> {
        let sorted = crate::oracle::sorted_distances(self.dataset, query)?;
        Ok(thetas
            .iter()
            .map(|t| sorted.partition_point(|d| d <= t) as f64)
            .collect())
    }
}
