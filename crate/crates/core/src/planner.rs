//! Conjunctive similarity queries: lead-predicate selection by estimated
//! cardinality, exact execution, and planning precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Record, RecordKind};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::oracle;
use crate::CardinalityEstimator;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub dataset: Dataset,
    pub features: FeatureConfig,
}

/// Attribute datasets whose row `i` all describe the same entity.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiAttrDataset {
    attributes: Vec<Attribute>,
}

impl MultiAttrDataset {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        let first = attributes.first().ok_or_else(|| Error::arg("at least one attribute required"))?;
        let rows = first.dataset.len();
        for a in &attributes {
            if a.dataset.len() != rows {
                return Err(Error::arg(format!(
                    "attribute '{}' has {} rows, expected {rows}",
                    a.name,
                    a.dataset.len()
                )));
            }
            if a.dataset.kind != a.features.record_kind() {
                return Err(Error::KindMismatch {
                    expected: a.features.record_kind(),
                    found: a.dataset.kind,
                });
            }
            if a.name.is_empty() || a.name.contains(['=', '\n', '/']) {
                return Err(Error::arg(format!("bad attribute name '{}'", a.name)));
            }
        }
        Ok(MultiAttrDataset { attributes })
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn rows(&self) -> usize {
        self.attributes[0].dataset.len()
    }

    /// Writes one `<name>.txt` per attribute plus the manifest.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("attributes={}\n", self.attributes.len());
        for (i, a) in self.attributes.iter().enumerate() {
            let file = format!("{}.txt", a.name);
            a.dataset.save(dir.join(&file))?;
            manifest.push_str(&format!("attr.{i}.name={}\nattr.{i}.kind={}\nattr.{i}.file={file}\n", a.name, a.dataset.kind));
            for (k, v) in a.features.to_kv() {
                manifest.push_str(&format!("attr.{i}.{k}={v}\n"));
            }
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key=value, found '{line}'"),
            })?;
            kv.insert(k.to_string(), v.to_string());
        }
        let count: usize = kv
            .get("attributes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::config("manifest lacks a valid 'attributes' entry"))?;
        let mut attributes = Vec::with_capacity(count);
        for i in 0..count {
            let prefix = format!("attr.{i}.");
            let get = |key: &str| {
                kv.get(&format!("{prefix}{key}"))
                    .cloned()
                    .ok_or_else(|| Error::config(format!("manifest lacks {prefix}{key}")))
            };
            let kind: RecordKind = get("kind")?.parse()?;
            let dataset = Dataset::load(dir.join(get("file")?), kind)?;
            let sub: BTreeMap<String, String> = kv
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v.clone())))
                .collect();
            attributes.push(Attribute {
                name: get("name")?,
                dataset,
                features: FeatureConfig::from_kv(&sub)?,
            });
        }
        Self::new(attributes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predicate {
    pub attribute: usize,
    pub record: Record,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConjunctiveQuery {
    pub predicates: Vec<Predicate>,
}

impl ConjunctiveQuery {
    /// Requires at least one predicate and at most one per attribute.
    pub fn new(predicates: Vec<Predicate>) -> Result<Self> {
        if predicates.is_empty() {
            return Err(Error::arg("a conjunctive query needs at least one predicate"));
        }
        let mut seen: Vec<usize> = predicates.iter().map(|p| p.attribute).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::arg("two predicates on the same attribute"));
        }
        Ok(ConjunctiveQuery { predicates })
    }

    fn check(&self, ds: &MultiAttrDataset) -> Result<()> {
        for p in &self.predicates {
            let attr = ds
                .attributes
                .get(p.attribute)
                .ok_or_else(|| Error::arg(format!("no attribute {}", p.attribute)))?;
            if p.record.kind() != attr.dataset.kind {
                return Err(Error::KindMismatch {
                    expected: attr.dataset.kind,
                    found: p.record.kind(),
                });
            }
        }
        Ok(())
    }
}

/// `lead` indexes the query's predicate list.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub lead: usize,
    pub estimated_cards: Vec<f64>,
}

/// Smallest estimate leads; the lowest index wins ties.
pub fn choose_plan(estimates: &[f64]) -> Result<Plan> {
    if estimates.is_empty() {
        return Err(Error::arg("no predicate estimates"));
    }
    if let Some(bad) = estimates.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::Numeric(format!("estimate {bad} is not a finite non-negative number")));
    }
    let mut lead = 0;
    for (i, e) in estimates.iter().enumerate() {
        if *e < estimates[lead] {
            lead = i;
        }
    }
    Ok(Plan {
        lead,
        estimated_cards: estimates.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    /// Ascending row ids.
    pub rows: Vec<usize>,
    /// Rows matched by the lead predicate, all of which get post-filtered.
    pub work: usize,
}

pub fn execute_plan(ds: &MultiAttrDataset, query: &ConjunctiveQuery, plan: &Plan) -> Result<Execution> {
    query.check(ds)?;
    let lead = query
        .predicates
        .get(plan.lead)
        .ok_or_else(|| Error::arg(format!("plan lead {} out of range", plan.lead)))?;
    let lead_ds = &ds.attributes[lead.attribute].dataset;
    let mut survivors = Vec::new();
    for (i, r) in lead_ds.records.iter().enumerate() {
        if oracle::distance(&lead.record, r)? <= lead.theta {
            survivors.push(i);
        }
    }
    let work = survivors.len();
    let mut rows = Vec::with_capacity(work);
    'rows: for i in survivors {
        for (j, p) in query.predicates.iter().enumerate() {
            if j == plan.lead {
                continue;
            }
            if oracle::distance(&p.record, &ds.attributes[p.attribute].dataset.records[i])? > p.theta {
                continue 'rows;
            }
        }
        rows.push(i);
    }
    Ok(Execution { rows, work })
}

/// One estimator per attribute, indexed like the dataset's attributes.
pub fn estimate_predicates(estimators: &[&dyn CardinalityEstimator], query: &ConjunctiveQuery) -> Result<Vec<f64>> {
    query
        .predicates
        .iter()
        .map(|p| {
            estimators
                .get(p.attribute)
                .ok_or_else(|| Error::arg(format!("no estimator for attribute {}", p.attribute)))?
                .estimate(&p.record, p.theta)
        })
        .collect()
}

pub fn true_cardinalities(ds: &MultiAttrDataset, query: &ConjunctiveQuery) -> Result<Vec<f64>> {
    query.check(ds)?;
    query
        .predicates
        .iter()
        .map(|p| Ok(oracle::count_within(&ds.attributes[p.attribute].dataset, &p.record, p.theta)? as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionReport {
    /// Percentage in `[0, 100]`.
    pub precision: f64,
    pub correct: usize,
    pub queries: usize,
    /// Total lead survivors under the estimator's plans.
    pub work: u64,
    /// Total lead survivors under the best plans.
    pub optimal_work: u64,
}

/// A pick is correct when its true cardinality equals the true minimum.
pub fn planning_precision(
    ds: &MultiAttrDataset,
    estimators: &[&dyn CardinalityEstimator],
    workload: &[ConjunctiveQuery],
) -> Result<PrecisionReport> {
    if workload.is_empty() {
        return Err(Error::arg("planning precision needs at least one query"));
    }
    let mut correct = 0;
    let mut work = 0u64;
    let mut optimal_work = 0u64;
    for q in workload {
        let truth = true_cardinalities(ds, q)?;
        let plan = choose_plan(&estimate_predicates(estimators, q)?)?;
        let best = truth.iter().copied().fold(f64::INFINITY, f64::min);
        if truth[plan.lead] == best {
            correct += 1;
        }
        work += truth[plan.lead] as u64;
        optimal_work += best as u64;
    }
    Ok(PrecisionReport {
        precision: 100.0 * correct as f64 / workload.len() as f64,
        correct,
        queries: workload.len(),
        work,
        optimal_work,
    })
}

/// Queries anchored at random rows: every attribute gets a predicate on the
/// anchor's value with a threshold drawn uniformly from the attribute's
/// label grid.
pub fn synthetic_workload(ds: &MultiAttrDataset, count: usize, seed: u64) -> Result<Vec<ConjunctiveQuery>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids: Vec<Vec<f64>> = ds
        .attributes
        .iter()
        .map(|a| a.features.label_thresholds(crate::eval::DEFAULT_GRID_POINTS))
        .collect();
    (0..count)
        .map(|_| {
            let row = rng.random_range(0..ds.rows());
            let predicates = ds
                .attributes
                .iter()
                .zip(&grids)
                .enumerate()
                .map(|(i, (a, grid))| Predicate {
                    attribute: i,
                    record: a.dataset.records[row].clone(),
                    theta: grid[rng.random_range(0..grid.len())],
                })
                .collect();
            ConjunctiveQuery::new(predicates)
        })
        .collect()
}

/// Plain-text workload: one predicate per line as `query<TAB>attribute<TAB>theta<TAB>record`.
pub fn workload_to_text(workload: &[ConjunctiveQuery]) -> String {
    let mut s = String::new();
    for (qi, q) in workload.iter().enumerate() {
        for p in &q.predicates {
            s.push_str(&format!("{qi}\t{}\t{:?}\t{}\n", p.attribute, p.theta, p.record.to_line()));
        }
    }
    s
}

pub fn workload_from_text(text: &str, ds: &MultiAttrDataset) -> Result<Vec<ConjunctiveQuery>> {
    let mut groups: BTreeMap<usize, Vec<Predicate>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: n + 1, msg };
        let mut parts = line.splitn(4, '\t');
        let mut field = |name: &str| parts.next().ok_or_else(|| perr(format!("missing {name}")));
        let qi: usize = field("query")?.parse().map_err(|_| perr("bad query index".into()))?;
        let attribute: usize = field("attribute")?.parse().map_err(|_| perr("bad attribute".into()))?;
        let theta: f64 = field("theta")?.parse().map_err(|_| perr("bad theta".into()))?;
        let raw = field("record")?;
        let attr = ds
            .attributes
            .get(attribute)
            .ok_or_else(|| perr(format!("no attribute {attribute}")))?;
        let record = Record::parse_line(attr.dataset.kind, raw)?;
        groups.entry(qi).or_default().push(Predicate { attribute, record, theta });
    }
    groups.into_values().map(ConjunctiveQuery::new).collect()
}
