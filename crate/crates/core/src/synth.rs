//! Clustered synthetic datasets and out-of-dataset query generation.

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::bits::Bits;
use crate::data::{Dataset, Record, RecordKind};
use crate::error::{Error, Result};
use crate::oracle;

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub kind: RecordKind,
    pub n: usize,
    pub clusters: usize,
    /// How far cluster centers sit from each other. Bits: flip probability
    /// from a shared base. Real vectors: standard deviation of centers.
    /// Sets and text ignore it; their cluster seeds are independent.
    pub spread: f64,
    /// Within-cluster noise. Bits: per-bit flip probability. Sets: chance an
    /// element comes from the whole universe instead of the cluster
    /// vocabulary. Text: per-position edit probability. Real vectors:
    /// standard deviation around the center.
    pub noise: f64,
    /// Zipf exponent of cluster sizes; 0 gives equal expected sizes.
    pub skew: f64,
    pub seed: u64,
    /// Bits and real vectors.
    pub dim: usize,
    /// Sets: element ids are drawn from `0..universe`.
    pub universe: u32,
    pub set_size: usize,
    pub alphabet: Vec<char>,
    pub l_max: usize,
}

impl GenSpec {
    pub fn bits(n: usize, dim: usize, clusters: usize, seed: u64) -> Self {
        GenSpec {
            kind: RecordKind::Bits,
            n,
            clusters,
            spread: 0.5,
            noise: 0.05,
            skew: 1.0,
            seed,
            dim,
            universe: 0,
            set_size: 0,
            alphabet: Vec::new(),
            l_max: 0,
        }
    }

    pub fn sets(n: usize, universe: u32, set_size: usize, clusters: usize, seed: u64) -> Self {
        GenSpec {
            kind: RecordKind::Set,
            universe,
            set_size,
            noise: 0.2,
            dim: 0,
            ..GenSpec::bits(n, 0, clusters, seed)
        }
    }

    pub fn text(n: usize, alphabet: &str, l_max: usize, clusters: usize, seed: u64) -> Self {
        GenSpec {
            kind: RecordKind::Text,
            alphabet: alphabet.chars().collect(),
            l_max,
            noise: 0.1,
            dim: 0,
            ..GenSpec::bits(n, 0, clusters, seed)
        }
    }

    pub fn real(n: usize, dim: usize, clusters: usize, seed: u64) -> Self {
        GenSpec {
            kind: RecordKind::RealVec,
            spread: 0.5,
            noise: 0.1,
            ..GenSpec::bits(n, dim, clusters, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.clusters == 0 || self.n < self.clusters {
            return bad(format!("need n >= clusters >= 1, got n={} clusters={}", self.n, self.clusters));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) || !(self.noise >= 0.0) || !(self.spread >= 0.0) {
            return bad("noise, spread and skew must be non-negative".into());
        }
        match self.kind {
            RecordKind::Bits if self.dim == 0 => bad("bit vectors need dim > 0".into()),
            RecordKind::Bits if self.noise > 1.0 || self.spread > 1.0 => {
                bad("bit flip probabilities must be at most 1".into())
            }
            RecordKind::RealVec if self.dim == 0 => bad("real vectors need dim > 0".into()),
            RecordKind::Set if self.universe == 0 || self.set_size == 0 => {
                bad("sets need universe > 0 and set_size > 0".into())
            }
            RecordKind::Set if (self.set_size as u64) * 2 > self.universe as u64 => {
                bad("universe must hold at least twice set_size elements".into())
            }
            RecordKind::Set if self.noise > 1.0 => bad("set noise is a probability".into()),
            RecordKind::Text if self.alphabet.is_empty() || self.l_max == 0 => {
                bad("text needs a non-empty alphabet and l_max > 0".into())
            }
            RecordKind::Text if self.noise > 1.0 => bad("text noise is a probability".into()),
            _ => Ok(()),
        }
    }
}

fn random_bits(dim: usize, rng: &mut impl Rng) -> Vec<bool> {
    (0..dim).map(|_| rng.random::<bool>()).collect()
}

fn flip(bits: &[bool], p: f64, rng: &mut impl Rng) -> Vec<bool> {
    bits.iter().map(|&b| if p > 0.0 && rng.random::<f64>() < p { !b } else { b }).collect()
}

fn random_text(alphabet: &[char], len: usize, rng: &mut impl Rng) -> Vec<char> {
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn mutate_text(seed: &[char], alphabet: &[char], p: f64, l_max: usize, rng: &mut impl Rng) -> Vec<char> {
    let mut out = Vec::with_capacity(seed.len() + 2);
    for &c in seed {
        if p > 0.0 && rng.random::<f64>() < p {
            match rng.random_range(0..3) {
                0 => out.push(alphabet[rng.random_range(0..alphabet.len())]),
                1 => {}
                _ => {
                    out.push(c);
                    out.push(alphabet[rng.random_range(0..alphabet.len())]);
                }
            }
        } else {
            out.push(c);
        }
    }
    out.truncate(l_max);
    out
}

fn set_from(vocab: &[u32], universe: u32, size: usize, noise: f64, rng: &mut impl Rng) -> Vec<u32> {
    let mut s = HashSet::with_capacity(size);
    while s.len() < size {
        let e = if noise > 0.0 && rng.random::<f64>() < noise {
            rng.random_range(0..universe)
        } else {
            vocab[rng.random_range(0..vocab.len())]
        };
        s.insert(e);
    }
    let mut v: Vec<u32> = s.into_iter().collect();
    v.sort_unstable();
    v
}

/// Builds a clustered dataset; a pure function of its `GenSpec`.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights: Vec<f64> = (0..spec.clusters).map(|c| 1.0 / ((c + 1) as f64).powf(spec.skew)).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::config(e.to_string()))?;
    let mut records = Vec::with_capacity(spec.n);
    match spec.kind {
        RecordKind::Bits => {
            let base = random_bits(spec.dim, &mut rng);
            let centers: Vec<Vec<bool>> = (0..spec.clusters).map(|_| flip(&base, spec.spread, &mut rng)).collect();
            for _ in 0..spec.n {
                let c = &centers[pick.sample(&mut rng)];
                records.push(Record::Bits(Bits::from_bools(flip(c, spec.noise, &mut rng))));
            }
        }
        RecordKind::RealVec => {
            let center_dist = Normal::new(0.0, spec.spread).map_err(|e| Error::config(e.to_string()))?;
            let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
            let centers: Vec<Vec<f64>> = (0..spec.clusters)
                .map(|_| (0..spec.dim).map(|_| center_dist.sample(&mut rng)).collect())
                .collect();
            for _ in 0..spec.n {
                let c = &centers[pick.sample(&mut rng)];
                records.push(Record::real(c.iter().map(|x| x + noise.sample(&mut rng)).collect())?);
            }
        }
        RecordKind::Set => {
            let vocab_size = (2 * spec.set_size).min(spec.universe as usize);
            let vocabs: Vec<Vec<u32>> = (0..spec.clusters)
                .map(|_| {
                    index::sample(&mut rng, spec.universe as usize, vocab_size)
                        .into_iter()
                        .map(|e| e as u32)
                        .collect()
                })
                .collect();
            for _ in 0..spec.n {
                let v = &vocabs[pick.sample(&mut rng)];
                let s = set_from(v, spec.universe, spec.set_size, spec.noise, &mut rng);
                records.push(Record::Set(s));
            }
        }
        RecordKind::Text => {
            let lo = (spec.l_max / 2).max(1);
            let seeds: Vec<Vec<char>> = (0..spec.clusters)
                .map(|_| {
                    let len = rng.random_range(lo..=spec.l_max);
                    random_text(&spec.alphabet, len, &mut rng)
                })
                .collect();
            for _ in 0..spec.n {
                let s = &seeds[pick.sample(&mut rng)];
                records.push(Record::Text(mutate_text(s, &spec.alphabet, spec.noise, spec.l_max, &mut rng)));
            }
        }
    }
    Dataset::new(spec.kind, records)
}

/// Result of k-medoids clustering over (a sample of) a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Medoids {
    /// Dataset record ids of the medoids.
    pub ids: Vec<usize>,
    /// Sum over clustered points of the distance to the nearest medoid.
    pub cost: f64,
    pub iterations: usize,
}

const MEDOID_SAMPLE: usize = 1000;
const MEDOID_ITERS: usize = 50;

/// PAM-style k-medoids: seeded random initial medoids, then repeated best
/// single swaps until no swap lowers the cost or 50 iterations pass.
/// Datasets above 1000 records are clustered on a seeded sample of 1000.
pub fn k_medoids(dataset: &Dataset, k: usize, seed: u64) -> Result<Medoids> {
    if k == 0 || k > dataset.len() {
        return Err(Error::arg(format!("k = {k} must be in 1..={}", dataset.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = if dataset.len() > MEDOID_SAMPLE {
        let mut v = index::sample(&mut rng, dataset.len(), MEDOID_SAMPLE).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..dataset.len()).collect()
    };
    let n = pool.len();
    let k = k.min(n);
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = oracle::distance(&dataset.records[pool[i]], &dataset.records[pool[j]])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut meds: Vec<usize> = index::sample(&mut rng, n, k).into_vec();
    let mut iterations = 0;
    loop {
        // Nearest and second-nearest medoid distance of every point.
        let mut near = vec![(usize::MAX, f64::INFINITY); n];
        let mut second = vec![f64::INFINITY; n];
        for p in 0..n {
            for (slot, &m) in meds.iter().enumerate() {
                let d = dist[p * n + m];
                if d < near[p].1 {
                    second[p] = near[p].1;
                    near[p] = (slot, d);
                } else if d < second[p] {
                    second[p] = d;
                }
            }
        }
        let cost: f64 = near.iter().map(|x| x.1).sum();
        if iterations == MEDOID_ITERS {
            break Ok(Medoids {
                ids: meds.into_iter().map(|m| pool[m]).collect(),
                cost,
                iterations,
            });
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for cand in 0..n {
            if meds.contains(&cand) {
                continue;
            }
            for slot in 0..k {
                let mut c = 0.0;
                for p in 0..n {
                    let dc = dist[p * n + cand];
                    let keep = if near[p].0 == slot { second[p] } else { near[p].1 };
                    c += keep.min(dc);
                }
                if c < best.map_or(cost, |b| b.2) {
                    best = Some((slot, cand, c));
                }
            }
        }
        match best {
            Some((slot, cand, _)) => {
                meds[slot] = cand;
                iterations += 1;
            }
            None => {
                break Ok(Medoids {
                    ids: meds.into_iter().map(|m| pool[m]).collect(),
                    cost,
                    iterations,
                })
            }
        }
    }
}

/// Index of the medoid nearest to `record` (lowest index on ties).
pub fn assign(dataset: &Dataset, medoids: &Medoids, record: &Record) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for (i, &m) in medoids.ids.iter().enumerate() {
        let d = oracle::distance(record, &dataset.records[m])?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Uniformly random record of the dataset's kind and shape.
fn random_record(dataset: &Dataset, rng: &mut impl Rng) -> Result<Record> {
    let sample = &dataset.records[rng.random_range(0..dataset.len())];
    Ok(match sample {
        Record::Bits(b) => Record::Bits(Bits::from_bools(random_bits(b.len(), rng))),
        Record::Text(t) => {
            let alphabet = if dataset.alphabet.is_empty() { vec!['a'] } else { dataset.alphabet.clone() };
            Record::Text(random_text(&alphabet, t.len(), rng))
        }
        Record::Set(s) => {
            let universe = (dataset.universe as usize).max(s.len());
            let mut ids: Vec<u32> = index::sample(rng, universe, s.len().max(1))
                .into_iter()
                .map(|e| e as u32)
                .collect();
            ids.sort_unstable();
            Record::Set(ids)
        }
        Record::RealVec(_) => {
            let dim = dataset.dim;
            let mut lo = vec![f64::INFINITY; dim];
            let mut hi = vec![f64::NEG_INFINITY; dim];
            for r in &dataset.records {
                for (j, x) in r.as_real()?.iter().enumerate() {
                    lo[j] = lo[j].min(*x);
                    hi[j] = hi[j].max(*x);
                }
            }
            Record::real(
                lo.iter()
                    .zip(&hi)
                    .map(|(a, b)| if b > a { rng.random_range(*a..*b) } else { *a })
                    .collect(),
            )?
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutOfDatasetQueries {
    pub queries: Vec<Record>,
    /// Sum of squared distances to the medoids, per selected query.
    pub scores: Vec<f64>,
    /// Scores of candidates that were generated but not selected.
    pub rejected_scores: Vec<f64>,
    pub medoids: Medoids,
}

const CANDIDATES_PER_QUERY: usize = 5;
const MAX_TRIES_PER_CANDIDATE: usize = 100;

/// Random records absent from the dataset, keeping the `count` with the
/// largest sum of squared distances to `k` medoids.
pub fn out_of_dataset_queries(dataset: &Dataset, count: usize, k: usize, seed: u64) -> Result<OutOfDatasetQueries> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot generate queries for an empty dataset"));
    }
    let medoids = k_medoids(dataset, k.min(dataset.len()), seed)?;
    let existing: HashSet<String> = dataset.records.iter().map(Record::to_line).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f6f_6471);
    let want = count * CANDIDATES_PER_QUERY;
    let mut candidates = Vec::with_capacity(want);
    let mut tries = 0;
    while candidates.len() < want {
        if tries >= want * MAX_TRIES_PER_CANDIDATE {
            break;
        }
        tries += 1;
        let r = random_record(dataset, &mut rng)?;
        if !existing.contains(&r.to_line()) {
            candidates.push(r);
        }
    }
    if candidates.len() < count {
        return Err(Error::InvalidArgument(format!(
            "only {} out-of-dataset candidates found after {tries} tries",
            candidates.len()
        )));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for r in candidates {
        let s: f64 = medoids
            .ids
            .iter()
            .map(|&m| oracle::distance(&r, &dataset.records[m]).map(|d| d * d))
            .sum::<Result<f64>>()?;
        scored.push((s, r));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let rest = scored.split_off(count);
    Ok(OutOfDatasetQueries {
        scores: scored.iter().map(|s| s.0).collect(),
        queries: scored.into_iter().map(|s| s.1).collect(),
        rejected_scores: rest.into_iter().map(|s| s.0).collect(),
        medoids,
    })
}
