//! Exact brute-force similarity selection, the ground truth for labels and tests.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, LabeledExample, Record};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

/// Distance between two records of the same kind: Hamming, Levenshtein,
/// Jaccard distance or Euclidean (L2).
pub fn distance(x: &Record, y: &Record) -> Result<f64> {
    match (x, y) {
        (Record::Bits(a), Record::Bits(b)) => Ok(a.hamming(b)? as f64),
        (Record::Text(a), Record::Text(b)) => Ok(levenshtein(a, b) as f64),
        (Record::Set(a), Record::Set(b)) => Ok(jaccard_distance(a, b)),
        (Record::RealVec(a), Record::RealVec(b)) => {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.len(),
                    found: b.len(),
                });
            }
            Ok(a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        }
        _ => Err(Error::KindMismatch {
            expected: x.kind(),
            found: y.kind(),
        }),
    }
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(ca != cb));
            diag = up;
        }
    }
    row[b.len()]
}

/// `1 - |a ∩ b| / |a ∪ b|` for sorted id lists; two empty sets are at distance 0.
pub fn jaccard_distance(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

fn check_kind(dataset: &Dataset, query: &Record) -> Result<()> {
    if query.kind() != dataset.kind {
        return Err(Error::KindMismatch {
            expected: dataset.kind,
            found: query.kind(),
        });
    }
    Ok(())
}

/// All distances from `query` to the dataset, sorted ascending.
pub fn sorted_distances(dataset: &Dataset, query: &Record) -> Result<Vec<f64>> {
    check_kind(dataset, query)?;
    let mut d = dataset
        .records
        .iter()
        .map(|y| distance(query, y))
        .collect::<Result<Vec<_>>>()?;
    d.sort_unstable_by(f64::total_cmp);
    Ok(d)
}

#[inline]
fn count_le(sorted: &[f64], theta: f64) -> u64 {
    sorted.partition_point(|&d| d <= theta) as u64
}

/// Number of records within distance `theta` of `query`, by full scan.
pub fn count_within(dataset: &Dataset, query: &Record, theta: f64) -> Result<u64> {
    check_kind(dataset, query)?;
    if !(theta >= 0.0) {
        return Err(Error::arg(format!("threshold {theta} must be non-negative")));
    }
    let mut n = 0;
    for y in &dataset.records {
        if distance(query, y)? <= theta {
            n += 1;
        }
    }
    Ok(n)
}

/// Exact cardinality per threshold bin for one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledCurve {
    pub query_id: usize,
    /// Records whose bin is exactly `i`.
    pub counts: Vec<u64>,
    /// Running sums of `counts`.
    pub prefix: Vec<u64>,
}

impl LabeledCurve {
    pub fn from_counts(query_id: usize, counts: Vec<u64>) -> Self {
        let prefix = counts
            .iter()
            .scan(0u64, |acc, c| {
                *acc += c;
                Some(*acc)
            })
            .collect();
        LabeledCurve {
            query_id,
            counts,
            prefix,
        }
    }
}

/// Curve from precomputed sorted distances. Bin `i` covers
/// `(upper(i-1), upper(i)]`; empty bins get count 0.
pub fn curve_from_sorted(query_id: usize, sorted: &[f64], uppers: &[Option<f64>]) -> LabeledCurve {
    let mut counts = Vec::with_capacity(uppers.len());
    let mut below = 0u64;
    for upper in uppers {
        match upper {
            Some(t) => {
                let c = count_le(sorted, *t);
                counts.push(c - below);
                below = c;
            }
            None => counts.push(0),
        }
    }
    LabeledCurve::from_counts(query_id, counts)
}

pub fn label_curve(
    dataset: &Dataset,
    cfg: &FeatureConfig,
    query_id: usize,
    query: &Record,
) -> Result<LabeledCurve> {
    let sorted = sorted_distances(dataset, query)?;
    Ok(curve_from_sorted(query_id, &sorted, &cfg.bin_uppers()))
}

/// Exact labels for every `(query, theta)` pair. Thresholds must be distinct
/// and lie in `[0, theta_max]`.
pub fn generate_labels(
    dataset: &Dataset,
    cfg: &FeatureConfig,
    queries: &[(usize, &Record)],
    thresholds: &[f64],
) -> Result<Vec<LabeledExample>> {
    let mut seen = thresholds.to_vec();
    seen.sort_unstable_by(f64::total_cmp);
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::arg("duplicate thresholds in label generation"));
    }
    if let Some(t) = thresholds
        .iter()
        .find(|t| !(**t >= 0.0 && **t <= cfg.theta_max))
    {
        return Err(Error::arg(format!(
            "threshold {t} outside [0, {}]",
            cfg.theta_max
        )));
    }
    let mut out = Vec::with_capacity(queries.len() * thresholds.len());
    for &(query_id, query) in queries {
        let sorted = sorted_distances(dataset, query)?;
        for &theta in thresholds {
            out.push(LabeledExample {
                query_id,
                theta,
                cardinality: count_le(&sorted, theta),
            });
        }
    }
    Ok(out)
}

pub const CURVES_HEADER: &str = "query_id,tau,count,prefix";

pub fn curves_to_csv(curves: &[LabeledCurve]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for c in curves {
        for (tau, (n, p)) in c.counts.iter().zip(&c.prefix).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", c.query_id, tau, n, p));
        }
    }
    out
}

pub fn curves_from_csv(text: &str) -> Result<Vec<LabeledCurve>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVES_HEADER => {}
        None => return Ok(Vec::new()),
        Some(_) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {CURVES_HEADER:?}"),
            })
        }
    }
    let mut curves: Vec<LabeledCurve> = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: idx + 1,
            msg: msg.to_string(),
        };
        let f = line
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("non-integer field"))?;
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let (qid, tau) = (f[0] as usize, f[1] as usize);
        match curves.last_mut() {
            Some(c) if c.query_id == qid => {
                if tau != c.counts.len() {
                    return Err(bad("tau values must be consecutive"));
                }
                c.counts.push(f[2]);
                c.prefix.push(f[3]);
            }
            _ => {
                if tau != 0 {
                    return Err(bad("curve must start at tau 0"));
                }
                curves.push(LabeledCurve {
                    query_id: qid,
                    counts: vec![f[2]],
                    prefix: vec![f[3]],
                });
            }
        }
    }
    for c in &curves {
        if *c != LabeledCurve::from_counts(c.query_id, c.counts.clone()) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("prefix column inconsistent for query {}", c.query_id),
            });
        }
    }
    Ok(curves)
}

pub fn save_curves(path: impl AsRef<Path>, curves: &[LabeledCurve]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, curves_to_csv(curves)).map_err(|e| Error::io(path, e))
}

pub fn load_curves(path: impl AsRef<Path>) -> Result<Vec<LabeledCurve>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    curves_from_csv(&text)
}
