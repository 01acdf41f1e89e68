//! Records, datasets, query workloads and labeled examples.
//!
//! Dataset files are newline-delimited UTF-8, one record per line:
//! bit vectors as `0`/`1` characters, strings verbatim, sets as
//! space-separated ids and real vectors as comma-separated decimals.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bits::Bits;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Bits,
    Text,
    Set,
    RealVec,
}

impl RecordKind {
    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Bits => "bits",
            RecordKind::Text => "text",
            RecordKind::Set => "set",
            RecordKind::RealVec => "realvec",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecordKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bits" => Ok(RecordKind::Bits),
            "text" => Ok(RecordKind::Text),
            "set" => Ok(RecordKind::Set),
            "realvec" => Ok(RecordKind::RealVec),
            other => Err(Error::arg(format!("unknown record kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Bits(Bits),
    Text(Vec<char>),
    /// Strictly increasing element ids.
    Set(Vec<u32>),
    RealVec(Vec<f64>),
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Bits(_) => RecordKind::Bits,
            Record::Text(_) => RecordKind::Text,
            Record::Set(_) => RecordKind::Set,
            Record::RealVec(_) => RecordKind::RealVec,
        }
    }

    pub fn text(s: &str) -> Self {
        Record::Text(s.chars().collect())
    }

    /// Builds a set record, sorting the ids. Duplicates are rejected.
    pub fn set(ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let mut v: Vec<u32> = ids.into_iter().collect();
        v.sort_unstable();
        if v.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidRecord("duplicate element id in set".into()));
        }
        Ok(Record::Set(v))
    }

    pub fn real(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidRecord("non-finite coordinate".into()));
        }
        Ok(Record::RealVec(v))
    }

    pub fn parse_line(kind: RecordKind, line: &str) -> Result<Self> {
        match kind {
            RecordKind::Bits => Ok(Record::Bits(Bits::parse(line.trim_end_matches('\r'))?)),
            RecordKind::Text => Ok(Record::text(line.trim_end_matches('\r'))),
            RecordKind::Set => {
                let ids = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<u32>()
                            .map_err(|_| Error::InvalidRecord(format!("bad element id {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Record::set(ids)
            }
            RecordKind::RealVec => {
                let line = line.trim();
                if line.is_empty() {
                    return Err(Error::InvalidRecord("empty real vector".into()));
                }
                let v = line
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::InvalidRecord(format!("bad real {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Record::real(v)
            }
        }
    }

    /// Serialized form, inverse of [`Record::parse_line`].
    pub fn to_line(&self) -> String {
        match self {
            Record::Bits(b) => b.to_string(),
            Record::Text(s) => s.iter().collect(),
            Record::Set(ids) => ids
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            Record::RealVec(v) => v
                .iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(","),
        }
    }

    pub fn as_bits(&self) -> Result<&Bits> {
        match self {
            Record::Bits(b) => Ok(b),
            other => Err(Error::KindMismatch {
                expected: RecordKind::Bits,
                found: other.kind(),
            }),
        }
    }

    pub fn as_text(&self) -> Result<&[char]> {
        match self {
            Record::Text(s) => Ok(s),
            other => Err(Error::KindMismatch {
                expected: RecordKind::Text,
                found: other.kind(),
            }),
        }
    }

    pub fn as_set(&self) -> Result<&[u32]> {
        match self {
            Record::Set(s) => Ok(s),
            other => Err(Error::KindMismatch {
                expected: RecordKind::Set,
                found: other.kind(),
            }),
        }
    }

    pub fn as_real(&self) -> Result<&[f64]> {
        match self {
            Record::RealVec(v) => Ok(v),
            other => Err(Error::KindMismatch {
                expected: RecordKind::RealVec,
                found: other.kind(),
            }),
        }
    }
}

/// A homogeneous collection of records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: RecordKind,
    pub records: Vec<Record>,
    /// Bit-vector or real-vector dimension; 0 for other kinds or no records.
    pub dim: usize,
    /// Maximum string length (text only).
    pub l_max: usize,
    /// Sorted distinct characters occurring in the data (text only).
    pub alphabet: Vec<char>,
    /// One past the largest element id (set only).
    pub universe: u32,
}

impl Dataset {
    /// Builds a dataset, checking kinds and dimensions and inferring metadata.
    pub fn new(kind: RecordKind, records: Vec<Record>) -> Result<Self> {
        let mut ds = Dataset {
            kind,
            records: Vec::with_capacity(records.len()),
            dim: 0,
            l_max: 0,
            alphabet: Vec::new(),
            universe: 0,
        };
        for r in records {
            ds.push(r)?;
        }
        Ok(ds)
    }

    /// Appends a record, updating the inferred metadata.
    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.kind() != self.kind {
            return Err(Error::KindMismatch {
                expected: self.kind,
                found: record.kind(),
            });
        }
        match &record {
            Record::Bits(b) => self.check_dim(b.len())?,
            Record::RealVec(v) => self.check_dim(v.len())?,
            Record::Text(s) => {
                self.l_max = self.l_max.max(s.len());
                let mut alpha: BTreeSet<char> = self.alphabet.iter().copied().collect();
                alpha.extend(s.iter().copied());
                self.alphabet = alpha.into_iter().collect();
            }
            Record::Set(ids) => {
                if let Some(&m) = ids.last() {
                    self.universe = self.universe.max(m + 1);
                }
            }
        }
        self.records.push(record);
        Ok(())
    }

    fn check_dim(&mut self, found: usize) -> Result<()> {
        if self.records.is_empty() {
            self.dim = found;
            Ok(())
        } else if self.dim != found {
            Err(Error::DimensionMismatch {
                expected: self.dim,
                found,
            })
        } else {
            Ok(())
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn parse(text: &str, kind: RecordKind) -> Result<Self> {
        let mut ds = Dataset::new(kind, Vec::new())?;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let rec = Record::parse_line(kind, line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            ds.push(rec).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        }
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>, kind: RecordKind) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::parse(&text, kind)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Query ids into a dataset, in sampling order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryWorkload {
    pub query_ids: Vec<usize>,
    pub seed: u64,
}

/// Draws `floor(ratio * |D|)` distinct ids uniformly without replacement.
pub fn sample_workload(dataset: &Dataset, ratio: f64, seed: u64) -> Result<QueryWorkload> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot sample a workload from an empty dataset"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::arg(format!("sampling ratio {ratio} not in (0, 1]")));
    }
    let n = (ratio * dataset.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query_ids = rand::seq::index::sample(&mut rng, dataset.len(), n).into_vec();
    Ok(QueryWorkload { query_ids, seed })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkloadSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles and splits 80:10:10. Validation and test each get `floor(n/10)`;
/// the remainder goes to training.
pub fn split_workload(workload: &QueryWorkload, seed: u64) -> Result<WorkloadSplit> {
    let n = workload.query_ids.len();
    if n < 10 {
        return Err(Error::arg(format!(
            "workload of {n} queries is too small to split (need at least 10)"
        )));
    }
    let mut ids = workload.query_ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let tenth = n / 10;
    let test = ids.split_off(n - tenth);
    let valid = ids.split_off(n - 2 * tenth);
    Ok(WorkloadSplit {
        train: ids,
        valid,
        test,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub query_id: usize,
    pub theta: f64,
    pub cardinality: u64,
}

pub const LABELS_HEADER: &str = "query_id,theta,cardinality";

pub fn labels_to_csv(examples: &[LabeledExample]) -> String {
    let mut out = String::from(LABELS_HEADER);
    out.push('\n');
    for e in examples {
        out.push_str(&format!("{},{:.6},{}\n", e.query_id, e.theta, e.cardinality));
    }
    out
}

pub fn labels_from_csv(text: &str) -> Result<Vec<LabeledExample>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LABELS_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {LABELS_HEADER:?}, found {h:?}"),
            })
        }
        None => return Ok(Vec::new()),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: idx + 1, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        }
        let query_id = fields[0]
            .parse::<usize>()
            .map_err(|_| bad(format!("bad query id {:?}", fields[0])))?;
        let theta = fields[1]
            .parse::<f64>()
            .ok()
            .filter(|t| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| bad(format!("bad threshold {:?}", fields[1])))?;
        let cardinality = fields[2]
            .parse::<u64>()
            .map_err(|_| bad(format!("bad cardinality {:?}", fields[2])))?;
        out.push(LabeledExample {
            query_id,
            theta,
            cardinality,
        });
    }
    Ok(out)
}

pub fn save_labels(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels_to_csv(examples)).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    labels_from_csv(&text)
}
