//! Hash families behind the Jaccard and Euclidean encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bits::Bits;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `k` seeded permutations of the element universe for b-bit minwise hashing.
///
/// Permutation `j` orders elements by `mix64(e ^ key_j)`. `mix64` is a
/// bijection on u64, so the order is total and defines a permutation of any
/// finite universe.
#[derive(Clone, Debug, PartialEq)]
pub struct MinwiseHasher {
    pub k: usize,
    pub b: u32,
    pub seed: u64,
    keys: Vec<u64>,
}

impl MinwiseHasher {
    pub fn new(k: usize, b: u32, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("minwise hashing needs at least one permutation"));
        }
        if !(1..=16).contains(&b) {
            return Err(Error::config(format!("b = {b} must be in 1..=16")));
        }
        let keys = (0..k as u64)
            .map(|j| mix64(seed ^ mix64(j.wrapping_add(0x9e37_79b9_7f4a_7c15))))
            .collect();
        Ok(MinwiseHasher { k, b, seed, keys })
    }

    pub fn code_dim(&self) -> usize {
        self.k << self.b
    }

    #[inline]
    fn rank(&self, j: usize, element: u32) -> u64 {
        mix64(element as u64 ^ self.keys[j])
    }

    /// Low `b` bits of the element of `set` that comes first under permutation `j`.
    pub fn bmin(&self, j: usize, set: &[u32]) -> u32 {
        let first = set
            .iter()
            .copied()
            .min_by_key(|&e| self.rank(j, e))
            .expect("non-empty set");
        first & ((1u32 << self.b) - 1)
    }

    pub fn encode(&self, set: &[u32]) -> Result<Bits> {
        if set.is_empty() {
            return Err(Error::InvalidRecord("cannot minhash an empty set".into()));
        }
        let block = 1usize << self.b;
        let mut out = Bits::zeros(self.code_dim());
        for j in 0..self.k {
            out.set(j * block + self.bmin(j, set) as usize);
        }
        Ok(out)
    }
}

/// One-hot b-bit minwise code under explicitly listed permutations, each given
/// as the universe written out in permuted order.
pub fn minwise_code_with_orders(set: &[u32], orders: &[Vec<u32>], b: u32) -> Result<Bits> {
    if set.is_empty() {
        return Err(Error::InvalidRecord("cannot minhash an empty set".into()));
    }
    let block = 1usize << b;
    let mut out = Bits::zeros(orders.len() * block);
    for (j, order) in orders.iter().enumerate() {
        let first = order
            .iter()
            .find(|e| set.contains(e))
            .ok_or_else(|| Error::InvalidRecord("set element missing from permutation".into()))?;
        out.set(j * block + (first & ((1 << b) - 1)) as usize);
    }
    Ok(out)
}

/// p-stable LSH `floor((a.x + b) / r)` with `a ~ N(0, I)`, `b ~ U[0, r)`.
///
/// Raw hash values are shifted by a per-function offset and clamped into
/// `[0, v]` before one-hot encoding into blocks of `v + 1` bits.
#[derive(Clone, Debug, PartialEq)]
pub struct EuclideanLsh {
    pub k: usize,
    pub r: f64,
    pub seed: u64,
    pub input_dim: usize,
    pub v: u32,
    pub offsets: Vec<i64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl EuclideanLsh {
    pub fn new(k: usize, r: f64, seed: u64, input_dim: usize) -> Result<Self> {
        if k == 0 || input_dim == 0 {
            return Err(Error::config("euclidean LSH needs k > 0 and input_dim > 0"));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::config(format!("bucket width r = {r} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..k * input_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b = (0..k).map(|_| rng.random::<f64>() * r).collect();
        Ok(EuclideanLsh {
            k,
            r,
            seed,
            input_dim,
            v: 0,
            offsets: vec![0; k],
            a,
            b,
        })
    }

    /// Sets the bucket range explicitly.
    pub fn with_range(mut self, offsets: Vec<i64>, v: u32) -> Result<Self> {
        if offsets.len() != self.k {
            return Err(Error::config("one offset per hash function required"));
        }
        self.offsets = offsets;
        self.v = v;
        Ok(self)
    }

    /// Chooses offsets (per-function minimum over `sample`) and `v` (the
    /// `quantile` of shifted values pooled over all functions).
    pub fn fit_range(self, sample: &[&[f64]], quantile: f64) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::config("cannot fit LSH range on an empty sample"));
        }
        let raws = sample
            .iter()
            .map(|x| self.raw_hashes(x))
            .collect::<Result<Vec<_>>>()?;
        let offsets: Vec<i64> = (0..self.k)
            .map(|j| raws.iter().map(|h| h[j]).min().unwrap())
            .collect();
        let mut shifted: Vec<i64> = raws
            .iter()
            .flat_map(|h| h.iter().zip(&offsets).map(|(x, o)| x - o))
            .collect();
        shifted.sort_unstable();
        let idx = ((quantile * shifted.len() as f64).ceil() as usize).clamp(1, shifted.len()) - 1;
        let v = shifted[idx].max(1) as u32;
        self.with_range(offsets, v)
    }

    pub fn code_dim(&self) -> usize {
        self.k * (self.v as usize + 1)
    }

    pub fn raw_hashes(&self, x: &[f64]) -> Result<Vec<i64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok((0..self.k)
            .map(|j| {
                let row = &self.a[j * self.input_dim..(j + 1) * self.input_dim];
                let dot: f64 = row.iter().zip(x).map(|(a, x)| a * x).sum();
                ((dot + self.b[j]) / self.r).floor() as i64
            })
            .collect())
    }

    /// One-hot blocks from already computed bucket values, each clamped to `[0, v]`.
    pub fn one_hot(&self, buckets: &[i64]) -> Bits {
        let block = self.v as usize + 1;
        let mut out = Bits::zeros(buckets.len() * block);
        for (j, &h) in buckets.iter().enumerate() {
            out.set(j * block + h.clamp(0, self.v as i64) as usize);
        }
        out
    }

    pub fn encode(&self, x: &[f64]) -> Result<Bits> {
        let shifted: Vec<i64> = self
            .raw_hashes(x)?
            .into_iter()
            .zip(&self.offsets)
            .map(|(h, o)| h - o)
            .collect();
        Ok(self.one_hot(&shifted))
    }
}
